"""Closed word-level vocabulary and the surface templates of the synthetic world.

Everything any component can ever emit or read is a token from this fixed table:
structural specials, template surface words, attribute value pools, and a pool of
entity names. The table is padded with reserved slots to exactly 512 entries so
model shapes stay stable no matter how many words the templates use.
"""
from __future__ import annotations

from .util import AtmError

VOCAB_SIZE = 512

# Structural tokens. <rag>/<one>/<cb>/<ext> tag the four training-task layouts;
# <fab> marks the slot where the attacker writes its fabrication.
SPECIALS = (
    "<pad>", "<bos>", "<eos>", "<doc>", "<q>", "<ans>",
    "<fab>", "<rag>", "<one>", "<cb>", "<ext>",
)
N_SPECIALS = len(SPECIALS)
PAD_ID, BOS_ID, EOS_ID, DOC_ID, Q_ID, ANS_ID, FAB_ID, RAG_ID, ONE_ID, CB_ID, EXT_ID = range(N_SPECIALS)

MONTHS = ("january", "february", "march", "april", "may", "june",
          "july", "august", "september", "october", "november", "december")
YEARS = tuple(str(y) for y in range(1900, 1930))
COLORS = ("crimson", "azure", "amber", "violet", "emerald", "ivory", "coral", "indigo",
          "scarlet", "teal", "ochre", "magenta", "olive", "cobalt", "slate", "pearl")
TRADES = ("baker", "smith", "weaver", "potter", "scribe", "miller", "mason", "tailor",
          "brewer", "carver", "tanner", "fletcher", "cooper", "chandler", "glazier",
          "sawyer", "shepherd", "falconer", "joiner", "wainwright")
PETS = ("falcon", "otter", "badger", "lynx", "raven", "heron", "marten", "stoat",
        "osprey", "viper", "gecko", "ibex", "jackal", "lemur", "mole", "newt")
METALS = ("iron", "copper", "silver", "tin", "zinc", "nickel", "bronze", "brass",
          "pewter", "steel", "lead", "mercury")
MOTTO_ADJS = ("bold", "quiet", "swift", "bright", "steady", "fierce",
              "gentle", "sly", "grand", "meek", "stern", "merry")
MOTTO_NOUNS = ("river", "mountain", "harbor", "forest", "meadow", "tower", "bridge",
               "garden", "lantern", "anchor", "compass", "saddle", "quill", "bellows")
MOTTO_VERBS = ("endures", "prevails", "awakens", "wanders", "returns", "ascends",
               "listens", "remembers", "gathers", "guards", "whispers", "abides")


class Attribute:
    """One entity attribute: how values look, how documents and questions read."""

    def __init__(self, name, pools, doc_templates, question_templates):
        self.name = name
        self.pools = pools                        # tuple of token pools, one per value slot
        self.doc_templates = doc_templates        # each template: tuple of tokens, "{e}" / "{0}"... slots
        self.question_templates = question_templates
        self.value_len = len(pools)

    def all_values(self):
        """Every value tuple, in deterministic enumeration order."""
        out = [()]
        for pool in self.pools:
            out = [v + (tok,) for v in out for tok in pool]
        return out

    def render_doc(self, template_idx, entity_name, value):
        return _fill(self.doc_templates[template_idx], entity_name, value)

    def render_question(self, template_idx, entity_name):
        return _fill(self.question_templates[template_idx], entity_name, ())


def _fill(template, entity_name, value):
    toks = []
    for t in template:
        if t == "{e}":
            toks.append(entity_name)
        elif t.startswith("{") and t.endswith("}"):
            toks.append(value[int(t[1:-1])])
        else:
            toks.append(t)
    return " ".join(toks)


def _t(text: str) -> tuple[str, ...]:
    return tuple(text.split())


# Doc templates 1-3 of each attribute carry the attribute's keyword; template 4
# paraphrases without it so lexical retrieval stays imperfect at small k.
ATTRIBUTES = (
    Attribute(
        "born", (MONTHS, YEARS),
        (
            _t("{e} was born in {0} {1}"),
            _t("{e} is noted born in {0} {1}"),
            _t("records name {e} born in {0} {1}"),
            _t("the birth of {e} came in {0} {1}"),
        ),
        (
            _t("when was {e} born"),
            _t("in what month and year was {e} born"),
            _t("what is the birth date of {e}"),
        ),
    ),
    Attribute(
        "color", (COLORS,),
        (
            _t("{e} favors the color {0}"),
            _t("the chosen color of {e} is {0}"),
            _t("{e} wears the color {0} always"),
            _t("the banner of {e} is {0}"),
        ),
        (
            _t("what color does {e} favor"),
            _t("which color does {e} wear"),
            _t("what color is the banner of {e}"),
        ),
    ),
    Attribute(
        "trade", (TRADES,),
        (
            _t("the trade of {e} is {0}"),
            _t("{e} works the trade of a {0}"),
            _t("guild rolls give the trade of {e} as {0}"),
            _t("{e} earns bread as a {0}"),
        ),
        (
            _t("what is the trade of {e}"),
            _t("which trade does {e} work"),
            _t("in what trade does {e} earn bread"),
        ),
    ),
    Attribute(
        "pet", (PETS,),
        (
            _t("{e} keeps a tame {0}"),
            _t("{e} keeps a {0} at home"),
            _t("folk say {e} keeps a {0}"),
            _t("a {0} follows {e} everywhere"),
        ),
        (
            _t("which animal keeps with {e}"),
            _t("what creature keeps with {e}"),
            _t("which creature follows {e}"),
        ),
    ),
    Attribute(
        "metal", (METALS,),
        (
            _t("the metal {e} smelts is {0}"),
            _t("{e} smelts the metal {0}"),
            _t("bars of the metal {0} fill the store of {e}"),
            _t("the forge of {e} burns {0}"),
        ),
        (
            _t("what metal does {e} smelt"),
            _t("which metal fills the store of {e}"),
            _t("what metal burns in the forge of {e}"),
        ),
    ),
    Attribute(
        "motto", (MOTTO_ADJS, MOTTO_NOUNS, MOTTO_VERBS),
        (
            _t("the motto of {e} reads {0} {1} {2}"),
            _t("{e} holds the motto {0} {1} {2}"),
            _t("the words of the motto of {e} say {0} {1} {2}"),
            _t("the crest of {e} bears {0} {1} {2}"),
        ),
        (
            _t("what is the motto of {e}"),
            _t("which motto does {e} hold"),
            _t("what does the crest of {e} bear"),
        ),
    ),
)

ATTRIBUTE_BY_NAME = {a.name: a for a in ATTRIBUTES}
MAX_ANSWER_LEN = max(a.value_len for a in ATTRIBUTES)
MAX_DOC_LEN = 16


def _template_words() -> list[str]:
    words: set[str] = set()
    for attr in ATTRIBUTES:
        for tpl in attr.doc_templates + attr.question_templates:
            for tok in tpl:
                if not (tok.startswith("{") and tok.endswith("}")):
                    words.add(tok)
    return sorted(words)


def _entity_name_pool(n: int, taken: set[str]) -> list[str]:
    """Deterministic pool of two-syllable names, skipping clashes with real words."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    syllables = [c + v for c in consonants for v in vowels]
    total = len(syllables) ** 2
    if n > total - len(taken):
        raise AtmError(f"cannot build {n} entity names from {total} syllable pairs")
    names: list[str] = []
    seen: set[str] = set()
    for i in range(total):
        j = (i * 2021) % total          # stride coprime to 70*70 visits every pair
        name = syllables[j // len(syllables)] + syllables[j % len(syllables)]
        if name in taken or name in seen:
            continue
        seen.add(name)
        names.append(name)
        if len(names) == n:
            break
    return names


_VALUE_POOLS = (MONTHS, YEARS, COLORS, TRADES, PETS, METALS,
                MOTTO_ADJS, MOTTO_NOUNS, MOTTO_VERBS)


def _build_table() -> tuple[tuple[str, ...], tuple[str, ...]]:
    pool_words: list[str] = [w for group in _VALUE_POOLS for w in group]
    # value words must stay identifiable: pools may not collide with each other
    # or with template surface words
    clash = set(pool_words) & set(_template_words())
    if len(set(pool_words)) != len(pool_words) or clash:
        raise AtmError(f"value pools overlap each other or the templates: {clash}")

    words: list[str] = list(SPECIALS)
    words.extend(sorted(set(pool_words) | set(_template_words())))
    names = _entity_name_pool(VOCAB_SIZE - len(words) - 8, set(words))
    words.extend(names)
    while len(words) < VOCAB_SIZE:
        words.append(f"<res{len(words):03d}>")
    return tuple(words), tuple(names)


TOKENS, ENTITY_NAME_POOL = _build_table()
TOKEN_TO_ID: dict[str, int] = {tok: i for i, tok in enumerate(TOKENS)}


def encode_text(text: str) -> list[int]:
    """Token ids of a space-separated token string; the vocabulary is closed."""
    out = []
    for w in text.split():
        tid = TOKEN_TO_ID.get(w)
        if tid is None:
            raise AtmError(f"word {w!r} is not in the vocabulary")
        out.append(tid)
    return out


def decode_ids(ids, keep_specials: bool = False) -> str:
    """Space-joined words; structural specials are dropped unless kept explicitly."""
    words = []
    for i in ids:
        tok = TOKENS[int(i)]
        if not keep_specials and tok.startswith("<") and tok.endswith(">"):
            continue
        words.append(tok)
    return " ".join(words)
