"""Neural stages: shifted-window classifier, grid detector, super-resolution upscaler, text recognizer."""
