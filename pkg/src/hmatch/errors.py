class HMatchError(Exception):
    """ Base class for domain errors. The CLI maps these to exit code 1."""


class EncodingError(HMatchError):
    def __init__(self, msg, joint=None):
        if joint is not None:
            msg = f'joint {joint}: {msg}'
        super().__init__(msg)
        self.joint = joint


class BalanceError(HMatchError):
    def __init__(self, supply, demand):
        super().__init__(f'unbalanced marginals: suppliers hold {supply!r}, demanders require {demand!r}')
        self.supply = supply
        self.demand = demand


class NumericError(HMatchError):
    pass


class EmptyLossError(HMatchError):
    pass


class DegenerateDecodeError(HMatchError):
    pass


class EmptyEvaluationError(HMatchError):
    pass


class ConventionError(HMatchError):
    pass


class DivergenceError(HMatchError):
    def __init__(self, step, loss):
        super().__init__(f'training diverged at step {step} (loss={loss})')
        self.step = step
        self.loss = loss


class WitnessNotFound(HMatchError):
    def __init__(self, attempts):
        super().__init__(f'no witness pair found after {attempts} attempts')
        self.attempts = attempts
