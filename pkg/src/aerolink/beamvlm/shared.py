""" Access to the data files shipped with the package. """
from importlib import resources
from pathlib import Path

from aerolink.beamvlm.errors import StorageError


def shared_data(name=''):
    """ Path to a file or directory under ``aerolink/beamvlm/data``.

    :Parameters:
     - 'name' (str): relative path such as 'scenarios/uav_linear.json'
    """
    root = Path(str(resources.files('aerolink.beamvlm') / 'data'))
    path = root / name if name else root
    if not path.exists():
        raise StorageError('no shared data named %r' % name)
    return path


def preset_names():
    return sorted(p.stem for p in shared_data('scenarios').glob('*.json'))
