"""Smoke test for the pycapsnet extension module.

Build the module first (see README), then run:

    python python/smoke_test.py
"""

import math
import os
import random
import struct
import sys
import tempfile

sys.path.insert(0, os.environ.get("PYCAPSNET_PATH", os.path.join(os.path.dirname(__file__), "..", "target", "python")))

import pycapsnet  # noqa: E402


def write_mnist(directory, n):
    rng = random.Random(0)
    for prefix in ("train", "t10k"):
        pixels = bytearray()
        labels = bytearray()
        for i in range(n):
            label = i % 10
            labels.append(label)
            for y in range(28):
                for x in range(28):
                    on = y // 3 == label or x // 3 == label
                    pixels.append(215 + rng.randrange(40) if on else rng.randrange(40))
        with open(os.path.join(directory, f"{prefix}-images-idx3-ubyte"), "wb") as f:
            f.write(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pixels))
        with open(os.path.join(directory, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
            f.write(struct.pack(">II", 0x801, n) + bytes(labels))


def main():
    v = pycapsnet.squash([6.0, 8.0])
    assert math.isclose(math.hypot(*v), 100 / 101, rel_tol=1e-6), v
    v = pycapsnet.custom_activation([math.log(2.0), 0.0])
    assert math.isclose(v[0], 0.5, rel_tol=1e-6), v
    assert "cifar-desk-conv2" in pycapsnet.presets()

    model = pycapsnet.CapsNet("mnist-desk", seed=1)
    assert model.input_shape == (1, 28, 28)
    assert model.parameter_shape("output.weight") == [6 * 6 * 8, 10, 16, 8]
    image = [0.5] * 784
    scores = model.scores(image * 2)
    assert len(scores) == 2 and len(scores[0]) == 10
    assert all(0.0 <= s < 1.0 for s in scores[0])
    assert model.predict(image) == [max(range(10), key=lambda k: scores[0][k])]

    with tempfile.TemporaryDirectory() as tmp:
        write_mnist(tmp, 20)
        config = pycapsnet.RunConfig(
            "dataset = mnist\nconv.0.filters = 8\nprimary.num_types = 4\n"
            "decoder.hidden = 32,64\ntrain.batch_size = 8\ntrain.epochs = 1\n"
        )
        assert pycapsnet.RunConfig(config.to_text()).to_text() == config.to_text()
        trainer = pycapsnet.Trainer(config, tmp)
        record = trainer.train_epoch()
        assert record["epoch"] == 1 and math.isfinite(record["total_loss"])
        path = os.path.join(tmp, "model.caps")
        trainer.save(path)
        loaded = pycapsnet.load_model(path)
        assert loaded.scores(image) == trainer.model().scores(image)
        assert pycapsnet.checkpoint_history(path) == trainer.history()

        acc = loaded.evaluate(tmp)
        ensemble = pycapsnet.Ensemble([loaded, loaded, loaded])
        assert len(ensemble) == 3
        assert ensemble.evaluate(tmp) == acc
        assert ensemble.scores(image) == loaded.scores(image)

    try:
        pycapsnet.RunConfig("train.learning_rate = 0.1\n")
    except ValueError as e:
        assert "train.learning_rate" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("pycapsnet smoke test passed")


if __name__ == "__main__":
    main()
