"""Learning-rate schedule, optimizer and the training loop."""
