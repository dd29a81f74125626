"""
Named architectures and search spaces shipped as package data.

The LitePose family is stored as one supernet plus a recorded sub-network
choice per model; a preset is the supernet rewired to that choice.
"""

import functools
import json
import logging
import os
from importlib import resources

from .archspec import ArchConfig, arch_from_dict, ensure_valid, load_arch
from .errors import ArchFormatError, ArchValidationError, UnknownPresetError
from .multibranch import MultiBranchConfig, validate_multibranch
from .shrink import RECORDED_SEQUENCE, multibranch_config
from .supernet import SearchSpace, SubnetChoice, subnet_arch

logger = logging.getLogger(__name__)

SUPERNET = 'LitePose-Supernet'
LITEPOSE_MODELS = ('LitePose-XS', 'LitePose-S', 'LitePose-M', 'LitePose-L', '0.5-LitePose')
HRNET_PREFIX = 'Scaled-HigherHRNet-W16'
HRNET_MODELS = tuple(f'{HRNET_PREFIX}-Shrink{i}' for i in range(len(RECORDED_SEQUENCE)))
SPACES = {
    'litepose-lms': 'space_litepose_lms.json',
    'litepose-xs': 'space_litepose_xs.json',
}
CHOICE_SPACE = {
    'LitePose-XS': 'litepose-xs',
    'LitePose-S': 'litepose-lms',
    'LitePose-M': 'litepose-lms',
    'LitePose-L': 'litepose-lms',
    '0.5-LitePose': 'litepose-lms',
}


@functools.lru_cache(maxsize=None)
def _data(filename: str):
    with resources.files(__package__).joinpath('data', filename).open('r', encoding='utf-8') as f:
        return json.load(f)


def preset_names() -> tuple[str, ...]:
    return (SUPERNET, *LITEPOSE_MODELS, HRNET_PREFIX, *HRNET_MODELS)


def supernet() -> ArchConfig:
    return ensure_valid(arch_from_dict(_data('litepose_supernet.json')))


def search_space(name: str) -> SearchSpace:
    try:
        filename = SPACES[name]
    except KeyError:
        raise UnknownPresetError(f'{name}: unknown search space. Expected one of {sorted(SPACES)}') from None
    return space_from_dict(_data(filename))


def space_from_dict(data: dict) -> SearchSpace:
    if not isinstance(data, dict) or set(data) != {'name', 'supernet', 'resolutions', 'width_ratios'}:
        raise ArchFormatError('search space: expected {name, supernet, resolutions, width_ratios}')
    net = data['supernet']
    cfg = preset(net) if isinstance(net, str) else arch_from_dict(net)
    if not isinstance(cfg, ArchConfig):
        raise ArchFormatError(f'{net}: a search space needs a single-branch supernet')
    return SearchSpace.from_arch(cfg, data['resolutions'], data['width_ratios'], name=data['name'])


def load_space(path) -> SearchSpace:
    """ Search space from a JSON file, or by name for the shipped spaces. """
    if str(path) in SPACES:
        return search_space(str(path))
    with open(path, 'r', encoding='utf-8') as f:
        return space_from_dict(json.load(f))


def recorded_choice(name: str) -> SubnetChoice:
    try:
        data = _data('litepose_choices.json')[name]
    except KeyError:
        raise UnknownPresetError(f'{name}: no recorded sub-network choice') from None
    return SubnetChoice.from_dict(search_space(CHOICE_SPACE[name]), data)


def preset(name: str) -> ArchConfig | MultiBranchConfig:
    """ Validated configuration of a named model. """
    logger.debug('%s: loading preset', name)
    if name == SUPERNET:
        return supernet()

    if name in LITEPOSE_MODELS:
        return subnet_arch(supernet(), recorded_choice(name), name=name)

    if name == HRNET_PREFIX:
        name = HRNET_MODELS[0]
    if name in HRNET_MODELS:
        step = RECORDED_SEQUENCE[HRNET_MODELS.index(name)]
        cfg = multibranch_config(step.config, step.base_channel, name=name)
        if violations := validate_multibranch(cfg):
            raise ArchValidationError(name, violations)
        return cfg

    raise UnknownPresetError(f'{name}: unknown preset. Expected one of {list(preset_names())}')


def resolve_model(spec: str) -> ArchConfig | MultiBranchConfig:
    """ A preset name or a path to an architecture JSON file. """
    if spec in preset_names():
        return preset(spec)
    if os.path.exists(spec):
        return load_arch(spec)
    raise UnknownPresetError(f'{spec}: neither a preset name nor an architecture file')
