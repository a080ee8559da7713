"""Word-level prompt vocabulary and the style / object prompt sets."""

from config.parameters import IDENTIFIER_TOKEN, PAD_TOKEN, PROMPT_LENGTH
from engine.diffusion import Prompt, make_prompt

IDENTIFIER = "[V]"

_WORDS = (
    "a", "an", "the", "of", "by", "in",
    "painting", "sketch", "artwork", "photo", "picture", "image",
)

SUBJECTS = (
    "house", "tree", "river", "mountain", "boat", "bridge", "flower", "bird",
    "cat", "dog", "horse", "castle", "garden", "harbour", "village", "forest",
    "lake", "road", "church", "field",
)

OBJECT_CLASSES = ("toy", "mug", "backpack", "clock")

CONTEXTS = ("beach", "snow", "city", "kitchen", "desert", "jungle", "street", "park", "studio", "library")

STYLE_TEMPLATES = (
    ("a", "painting", "of", "{subject}", "by", IDENTIFIER),
    ("a", "sketch", "of", "{subject}", "by", IDENTIFIER),
    ("an", "artwork", "of", "{subject}", "by", IDENTIFIER),
)

OBJECT_TEMPLATES = (
    ("a", "photo", "of", IDENTIFIER, "{cls}", "in", "the", "{context}"),
    ("a", "picture", "of", IDENTIFIER, "{cls}", "in", "the", "{context}"),
    ("an", "image", "of", IDENTIFIER, "{cls}", "in", "the", "{context}"),
)

# Dataset captions; the style name and the object identity both sit in the identifier slot
STYLE_CAPTION = ("a", "painting", "by", IDENTIFIER)
OBJECT_CAPTION = ("a", "photo", "of", IDENTIFIER, "{cls}")
BASE_CAPTION = ("a", "picture", "of", "{subject}")

VOCAB: dict[str, int] = {"<pad>": PAD_TOKEN, IDENTIFIER: IDENTIFIER_TOKEN}
for _word in _WORDS + SUBJECTS + OBJECT_CLASSES + CONTEXTS:
    VOCAB.setdefault(_word, len(VOCAB))
INVERSE_VOCAB = {i: w for w, i in VOCAB.items()}
VOCAB_SIZE = len(VOCAB)


def tokenize(words, **slots) -> Prompt:
    """Fill ``{slot}`` placeholders, map words to ids, pad to PROMPT_LENGTH."""
    filled = [w.format(**slots) if "{" in w else w for w in words]
    unknown = [w for w in filled if w not in VOCAB]
    if unknown:
        raise ValueError(f"Words {unknown} are not in the prompt vocabulary")
    return make_prompt([VOCAB[w] for w in filled], VOCAB_SIZE, PROMPT_LENGTH)


def detokenize(prompt) -> str:
    return " ".join(INVERSE_VOCAB[int(t)] for t in prompt if int(t) != PAD_TOKEN)


def style_prompts(n: int) -> list[Prompt]:
    """Generation prompts for a style task: template x subject, first n."""
    prompts = [tokenize(t, subject=s) for s in SUBJECTS for t in STYLE_TEMPLATES]
    return prompts[:n]


def object_prompts(cls: str, n: int) -> list[Prompt]:
    """Generation prompts for an object task: template x context, first n."""
    if cls not in OBJECT_CLASSES:
        raise ValueError(f"Unknown object class {cls!r}; choose from {OBJECT_CLASSES}")
    prompts = [tokenize(t, cls=cls, context=c) for c in CONTEXTS for t in OBJECT_TEMPLATES]
    return prompts[:n]
