"""VLCD desk engine: contrastive vision-language distillation on a synthetic world."""
