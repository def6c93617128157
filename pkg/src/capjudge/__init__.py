from .backend import BackendRequest, BackendResponse, MockBackend, MockScript, OpenAIBackend, create_backend
from .config import RunConfig
from .evaluate import evaluate_caption, evaluate_dataset, explain_dataset, export_sft_records, time_profile
from .explanations import StructuredExplanation, aggregate_ratings, parse_explanation
from .judgments import JudgmentInstance, PairwisePreferenceTask, load_dataset, merge_duplicates, stratified_sample
from .scoring import bin_score, extract_digit_distributions, smooth_score
from .stats import kendall_tau_b, kendall_tau_c, pascal50s_accuracy
