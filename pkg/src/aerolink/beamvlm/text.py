""" Byte-level tokenizer, instruction prompts and the answer grammar.

Answers are exactly `horizon` beam indices written in decimal and separated
by a comma and optional spaces, e.g. ``5, 6, 6, 7, 8``.
"""
import dataclasses
import functools
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

from aerolink.beamvlm.errors import (AnswerSyntaxError, ConfigError, DetokenizeError, EmptyHistory,
                                     MalformedCount, OutOfRange, StorageError)
from aerolink.beamvlm.shared import shared_data

HORIZON = 5


# Vocabulary #######################################################################################
class Vocabulary(object):
    """ 256 byte ids followed by the special tokens. """
    BOS = 256
    EOS = 257
    PAD = 258
    IMG = 259
    SIZE = 260
    SPECIALS = (BOS, EOS, PAD, IMG)


def tokenize(text):
    """ Token ids of a str (UTF-8, surrogateescape) or bytes; never emits special ids. """
    if isinstance(text, str):
        text = text.encode('utf-8', 'surrogateescape')
    return list(bytes(text))


def detokenize_bytes(ids):
    """ Raw bytes of a token id list, BOS and EOS dropped. """
    out = bytearray()
    for i in ids:
        i = int(i)
        if i in (Vocabulary.BOS, Vocabulary.EOS):
            continue
        if i in (Vocabulary.PAD, Vocabulary.IMG):
            raise DetokenizeError('token id %d (%s) has no text'
                                  % (i, 'PAD' if i == Vocabulary.PAD else 'IMG'))
        if not 0 <= i < 256:
            raise DetokenizeError('token id %d is outside the vocabulary' % i)
        out.append(i)
    return bytes(out)


def detokenize(ids):
    return detokenize_bytes(ids).decode('utf-8', 'surrogateescape')


# Prompt ###########################################################################################
BLOCKS = ('dataset_def', 'task_instruction', 'context_hint')
_HEADERS = {'dataset': 'dataset_def', 'task': 'task_instruction', 'hint': 'context_hint'}
_HEADER = re.compile(r'^\[(\w+)\]\s*$')


@dataclass(frozen=True)
class PromptTemplate:
    """ The three instruction blocks, rendered in fixed order.

    Blocks may use the placeholders {M}, {N_FRAMES}, {HORIZON} and
    {SCENARIO}. Empty blocks are left out of the rendered prompt.
    """
    dataset_def: str = ''
    task_instruction: str = ''
    context_hint: str = ''
    scenario_tag: str = 'UAV'

    def render(self, m, n_frames, horizon=HORIZON):
        values = {'{M}': str(m), '{N_FRAMES}': str(n_frames), '{HORIZON}': str(horizon),
                  '{SCENARIO}': self.scenario_tag}
        lines = []
        for name in BLOCKS:
            block = getattr(self, name)
            for key, value in values.items():
                block = block.replace(key, value)
            if block:
                lines.append(block)
        return '\n'.join(lines)

    def without(self, *blocks):
        """ Copy with the named blocks emptied. """
        unknown = set(blocks) - set(BLOCKS)
        if unknown:
            raise ConfigError('unknown prompt block %s' % sorted(unknown)[0])
        return dataclasses.replace(self, **{b: '' for b in blocks})

    def to_text(self):
        parts = []
        for header, name in _HEADERS.items():
            parts.append('[%s]\n%s\n' % (header, getattr(self, name)))
        return '\n'.join(parts)

    @classmethod
    def from_text(cls, text, scenario_tag='UAV'):
        """ Parse a template document made of ``[dataset]``, ``[task]`` and ``[hint]`` sections.

        A missing or empty section gives an empty block.
        """
        blocks = {}
        current = None
        for line in text.splitlines():
            match = _HEADER.match(line)
            if match:
                if match.group(1) not in _HEADERS:
                    raise ConfigError('unknown prompt section [%s]' % match.group(1))
                current = _HEADERS[match.group(1)]
                blocks[current] = []
            elif current is None:
                if line.strip():
                    raise ConfigError('prompt text found before any section header')
            else:
                blocks[current].append(line)
        return cls(scenario_tag=scenario_tag,
                   **{name: '\n'.join(lines).strip() for name, lines in blocks.items()})

    @classmethod
    def from_file(cls, path, scenario_tag='UAV'):
        try:
            text = Path(path).read_text(encoding='utf-8')
        except OSError as err:
            raise StorageError('cannot read prompt template %s: %s' % (path, err))
        return cls.from_text(text, scenario_tag)


@functools.lru_cache(maxsize=None)
def default_template():
    return PromptTemplate.from_file(shared_data('prompts/full.txt'))


def load_prompt_variants(directory, scenario_tag='UAV'):
    """ Templates of every ``*.txt`` file of a directory, keyed by file stem, 'full' first. """
    folder = Path(directory)
    if not folder.is_dir():
        raise StorageError('prompt directory %s does not exist' % folder)
    names = sorted(p.stem for p in folder.glob('*.txt'))
    if 'full' in names:
        names.remove('full')
        names.insert(0, 'full')
    return {name: PromptTemplate.from_file(folder / ('%s.txt' % name), scenario_tag)
            for name in names}


def build_prompt(m, n_frames=8, horizon=HORIZON, scenario_tag='UAV', template=None):
    """ Instruction text given to the model.

    :Parameters:
     - 'm' (int): codebook size
     - 'n_frames' (int): number of observed frames
     - 'horizon' (int): number of beams to predict
     - 'scenario_tag' (str): 'UAV' or 'V2I'
     - 'template' (PromptTemplate): defaults to the shipped full prompt
    """
    if m < 2 or n_frames < 1 or horizon < 1:
        raise ConfigError('invalid prompt sizes m=%d n_frames=%d horizon=%d'
                          % (m, n_frames, horizon))
    template = template if template is not None else default_template()
    return dataclasses.replace(template, scenario_tag=scenario_tag).render(m, n_frames, horizon)


# Answers ##########################################################################################
_ANSWER = re.compile(r'\s*[0-9]+(?:, *[0-9]+)*\s*')


@dataclass(frozen=True)
class ParsedAnswer:
    beams: Tuple[int, ...]


def parse_answer(text, m, horizon=HORIZON):
    """ Beam indices of a generated answer.

    :Returns:
     - ParsedAnswer

    Raises AnswerSyntaxError for characters outside the grammar,
    MalformedCount when the number of integers differs from `horizon` and
    OutOfRange for an index outside 1..m.
    """
    if not _ANSWER.fullmatch(text):
        raise AnswerSyntaxError('answer %r is not a comma-separated list of integers' % text)
    tokens = re.findall(r'[0-9]+', text)
    if len(tokens) != horizon:
        raise MalformedCount('expected %d beam indices, got %d' % (horizon, len(tokens)))
    for tok in tokens:
        digits = tok.lstrip('0') or '0'
        # more digits than m: out of range without converting
        if len(digits) > len(str(m)) or not 1 <= int(digits) <= m:
            shown = digits if len(digits) <= 12 else digits[:12] + '...'
            raise OutOfRange('beam index %s outside 1..%d' % (shown, m))
    return ParsedAnswer(beams=tuple(int(tok) for tok in tokens))


def format_answer(beams, m=None):
    """ Canonical answer text, e.g. '5, 12, 12, 13, 14'. """
    for b in beams:
        if int(b) < 1 or (m is not None and int(b) > m):
            raise OutOfRange('beam index %d outside 1..%s' % (b, m if m is not None else 'M'))
    return ', '.join(str(int(b)) for b in beams)


def fallback_answer(history, horizon=HORIZON):
    """ Repeat the last observed beam `horizon` times. """
    if len(history) == 0:
        raise EmptyHistory('no observed beam to fall back on')
    return ParsedAnswer(beams=(int(history[-1]),) * horizon)
