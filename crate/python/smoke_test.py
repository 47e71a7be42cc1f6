"""Quick check that the extension module loads and its main entry points run."""

import math
import os
import tempfile

import spikeinv_py as si


def main():
    model = si.Model("snn-mlp", height=4, width=4, classes=3, seed=1)
    print(model, "params:", model.param_count)

    spikes = si.rate_encode([0.5] * 16, 4, 4, steps=model.steps, seed=2)
    assert len(spikes) == model.steps and all(len(r) == 16 for r in spikes)
    post = model.predict_spikes(spikes)
    assert len(post) == 3 and abs(sum(post) - 1.0) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        again = si.Model.load(path)
        assert again.predict_spikes(spikes) == post

    result = si.run_attack(model, "blv2", 1, iterations=5, samples=3, seed=0)
    print(result)
    assert result.iterations <= 5 and len(result.spike_samples) == 3
    assert all(v in (0, 1) for s in result.spike_samples for row in s for v in row)

    ann = si.Model("ann-mlp", height=4, width=4, classes=3, seed=1)
    mi = si.run_attack(ann, "miface", 0, iterations=5)
    assert all(0.0 <= v <= 1.0 for v in mi.image_samples[0])

    w = si.nes_gradient([0.0, math.log(3.0)], [[1.0, 0.0], [0.0, 1.0]])
    assert abs(w[0] - 0.75) < 1e-12 and abs(w[1] - 0.25) < 1e-12
    assert si.clamp_scale([-1.0, 0.5, 2.0]) == [0.0, 0.25, 1.0]

    truth = [0, 0, 1]
    posts = [[0.8, 0.2], [0.4, 0.6], [0.3, 0.7]]
    assert abs(si.attack_accuracy(truth, posts) - 200.0 / 3.0) < 1e-9
    assert si.daa(truth, posts, [0, 1]) == 100.0
    assert si.topk_accuracy(truth, posts, k=2) == 100.0
    print("smoke test passed")


if __name__ == "__main__":
    main()
