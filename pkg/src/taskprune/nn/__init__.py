from .model import Block, Model, build_model, evaluate_accuracy, predict

__all__ = ["Block", "Model", "build_model", "evaluate_accuracy", "predict"]
