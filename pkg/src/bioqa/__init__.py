"""Zero-/few-shot LLM pipelines for BioASQ Task B and MedProcNER."""

from .core import ExactAnswer, IdealAnswer, QType, Question, QuestionResult, RunConfig, Snippet

__version__ = "0.1.0"

__all__ = ["ExactAnswer", "IdealAnswer", "QType", "Question", "QuestionResult", "RunConfig", "Snippet"]
