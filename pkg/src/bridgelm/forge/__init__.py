"""Instruction-corpus construction: ingest, merge, prompt, parse, build, stats."""

from .build import BuildResult, RejectionBudgetError, build_corpus, build_sep_variant, write_build
from .client import ChatClient, ClientConfig, Completion, MockChatService, MockJudge, ServiceError
from .parse import Dialogue, Rejection, parse_dialogue, read_dialogues
from .prompts import build_messages, load_exemplars, render_amassment
from .records import AnnotationStore, MergedImageContext, ingest, ingest_all, merge_by_image
from .stats import DatasetStats, compute_stats, question_type
