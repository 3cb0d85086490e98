"""Per-task constants for the four LaMP personalization tasks."""

from __future__ import annotations

from enum import Enum
from typing import Dict, Optional, Tuple


class MetricProfile(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"
    GENERATION = "generation"


class TaskKind(str, Enum):
    MOVIE_TAGGING = "MovieTagging"
    PRODUCT_RATING = "ProductRating"
    TITLE_GENERATION = "TitleGeneration"
    TWEET_PARAPHRASE = "TweetParaphrase"

    @classmethod
    def parse(cls, text: "str | TaskKind") -> "TaskKind":
        """Accept the enum value, the LaMP id or the template name."""

        if isinstance(text, TaskKind):
            return text
        needle = str(text or "").strip().lower()
        for kind, profile in TASK_PROFILES.items():
            aliases = {
                kind.value.lower(),
                kind.name.lower(),
                profile["lamp_id"].lower(),
                profile["template_name"],
            }
            if needle in aliases:
                return kind
        raise ValueError(f"unknown task kind: {text!r}")

    @property
    def profile(self) -> dict:
        return TASK_PROFILES[self]

    @property
    def metric_profile(self) -> MetricProfile:
        return TASK_PROFILES[self]["metric_profile"]

    @property
    def template_name(self) -> str:
        return TASK_PROFILES[self]["template_name"]

    @property
    def label_space(self) -> Optional[Tuple[str, ...]]:
        return TASK_PROFILES[self]["label_space"]


MOVIE_TAGS: Tuple[str, ...] = (
    "sci-fi",
    "based on a book",
    "comedy",
    "action",
    "twist ending",
    "dystopia",
    "dark comedy",
    "classic",
    "psychology",
    "fantasy",
    "romance",
    "thought-provoking",
    "social commentary",
    "violence",
    "true story",
)

RATING_LABELS: Tuple[str, ...] = ("1", "2", "3", "4", "5")

# Characters stripped from the end of a bare tag answer before matching.
TRAILING_PUNCTUATION = ".,;:!?"
QUOTE_CHARACTERS = "\"'`"


TASK_PROFILES: Dict[TaskKind, dict] = {
    TaskKind.MOVIE_TAGGING: {
        "display_name": "Movie Tagging",
        "lamp_id": "LaMP-2",
        "metric_profile": MetricProfile.CLASSIFICATION,
        "input_placeholder": "MOVIE",
        "template_name": "movie_tagging",
        "profile_line": 'The tag for the movie: "{text}" is {label}',
        "label_space": MOVIE_TAGS,
        "metrics": ("accuracy", "macro_f1"),
    },
    TaskKind.PRODUCT_RATING: {
        "display_name": "Product Rating",
        "lamp_id": "LaMP-3",
        "metric_profile": MetricProfile.REGRESSION,
        "input_placeholder": "REVIEW",
        "template_name": "product_rating",
        "profile_line": '{label} is the score for "{text}"',
        "label_space": RATING_LABELS,
        "metrics": ("mae", "rmse"),
    },
    TaskKind.TITLE_GENERATION: {
        "display_name": "Title Generation",
        "lamp_id": "LaMP-5",
        "metric_profile": MetricProfile.GENERATION,
        "input_placeholder": "ABSTRACT",
        "template_name": "title_generation",
        "profile_line": '"{label}" is the title for "{text}"',
        "label_space": None,
        "metrics": ("rouge1", "rougeL"),
    },
    TaskKind.TWEET_PARAPHRASE: {
        "display_name": "Tweet Paraphrasing",
        "lamp_id": "LaMP-7",
        "metric_profile": MetricProfile.GENERATION,
        "input_placeholder": "TWEET",
        "template_name": "tweet_paraphrase",
        "profile_line": '"{text}"',
        "label_space": None,
        "metrics": ("rouge1", "rougeL"),
    },
}

DEFAULT_TASK_KEY = TaskKind.MOVIE_TAGGING

UNLABELED_PROFILE_LINE = '"{text}"'


def normalize_tag(text: str) -> str:
    cleaned = (text or "").strip()
    previous = None
    while cleaned != previous:
        previous = cleaned
        cleaned = cleaned.strip().strip(QUOTE_CHARACTERS).rstrip(TRAILING_PUNCTUATION)
    return cleaned.strip().lower()


def validate_label(kind: TaskKind, value: Optional[str]) -> bool:
    """Strict label-space membership check used for gold answers and profile labels."""

    if value is None:
        return False
    text = str(value).strip()
    if not text:
        return False
    profile = kind.metric_profile
    if profile is MetricProfile.CLASSIFICATION:
        return text.lower() in MOVIE_TAGS
    if profile is MetricProfile.REGRESSION:
        return text in RATING_LABELS
    return True
