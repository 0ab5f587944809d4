"""
Helpers shared by the test files: tiny configurations that keep the numpy models fast,
and a plain runner that prints a pass/fail summary when a test file is run directly.
"""

import dataclasses
import inspect
import tempfile
from pathlib import Path

from dialstory.config import CoherenceConfig, DecodingConfig, GeneratorConfig, ModelConfig, RunConfig, TrainConfig


def small_generator_config(**overrides):
    """Corpus settings for a handful of short stories."""
    config = dataclasses.replace(GeneratorConfig(story_count=12, seed=7), **overrides)
    config.validate("corpus")
    return config


def small_model_config(vocab_size, **overrides):
    config = ModelConfig(vocab_size=vocab_size, model_dim=16, layers_encoder=1, layers_decoder=1,
                         character_encoder_layers=1, attention_heads=2, feedforward_dim=32,
                         max_sequence_length=512, dropout=0.0)
    config = dataclasses.replace(config, **overrides)
    config.validate("model")
    return config


def small_run_config(task="dialgen", **train_overrides):
    train = dataclasses.replace(TrainConfig(task=task, epochs=1, batch_size=2, learning_rate=1e-3,
                                            coverage_window=2), **train_overrides)
    train.validate("train")
    model = ModelConfig(model_dim=16, layers_encoder=1, layers_decoder=1 if task == "dialgen" else 0,
                        character_encoder_layers=1, attention_heads=2, feedforward_dim=32, dropout=0.0)
    return RunConfig(model=model, train=train, decoding=DecodingConfig(max_tokens=40))


def small_coherence_config(**overrides):
    config = dataclasses.replace(CoherenceConfig(epochs=1, batch_size=4, model_dim=16, attention_heads=2,
                                                 feedforward_dim=32, valid_fraction=0.25, dropout=0.0),
                                 **overrides)
    config.validate("coherence")
    return config


def run_module_tests(namespace):
    """
    Run every test_* function in a module namespace and print a summary.
    Functions taking a tmp_path argument get a fresh temporary directory.
    Returns:
        int: 0 when every test passed, 1 otherwise
    """
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]
    results = []
    for name, fn in tests:
        try:
            if "tmp_path" in inspect.signature(fn).parameters:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            results.append((name, True))
        except Exception as e:
            print(f"❌ {name} failed: {e!r}")
            results.append((name, False))

    print("\n" + "=" * 60)
    print("📊 TEST SUMMARY")
    print("=" * 60)
    passed = 0
    for name, ok in results:
        print(f"{name:.<50} {'✅ PASSED' if ok else '❌ FAILED'}")
        passed += int(ok)
    print(f"\nOverall: {passed}/{len(results)} tests passed")
    return 0 if passed == len(results) else 1
