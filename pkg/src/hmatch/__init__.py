from hmatch.__version__ import __version__
from hmatch.views import ConfigView
from .parser import ConfigParser, load_heatmap, load_keypoints, parse_heatmap, parse_keypoints


def parse_config(text):
    """ Parse run configuration text.

    Returns a ConfigView, a read-only mapping of config keys (see hmatch.views.KEY_TYPES)
    to typed values. Comment and blank lines are dropped; a repeated key keeps its last
    value.

    :rtype: hmatch.views.ConfigView
    """
    return ConfigView(ConfigParser(text_iterable=text).entries)


def parse_config_file(file, encoding='utf-8'):
    """ Reads the file's contents and returns the output of parse_config(text=contents).
    """
    with open(file, encoding=encoding) as f:
        return parse_config(f.read())
