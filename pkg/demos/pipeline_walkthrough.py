"""Walk through every stage on synthetic speakers, printing what each produces.

    python demos/pipeline_walkthrough.py [workdir]

Takes under a minute on one CPU core. The network trained here is small and
briefly trained, so expect estimates near the mixture baseline, not above it.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from tsenet import audio, features, ivector, metrics, synth
from tsenet import model as Mo
from tsenet import trainer as Tr

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="tsenet_demo_"))
print(f"working in {work}")

# 1. Speakers: formant-filtered pulse trains with a per-speaker pitch.
train_spk = synth.make_corpus(work / "train_src", n_male=3, n_female=3, utts_per_speaker=5, seed=0, prefix="trn")
test_spk = synth.make_corpus(work / "test_src", n_male=2, n_female=2, utts_per_speaker=4, seed=1, prefix="tst")
print(f"{len(train_spk.speaker_ids())} training speakers, {len(test_spk.speaker_ids())} held-out speakers")

# 2. Acoustic features and the i-vector extractor.
feats = {u.path: features.pipeline(audio.read_wav(u.path)) for u in train_spk.all_utterances()}
ubm = ivector.train_ubm(list(feats.values()), n_components=16, em_iters=5, seed=0)
stats = {p: ivector.accumulate_stats(ubm, x) for p, x in feats.items()}
tv = ivector.train_tv(ubm, list(stats.values()), rank=16, em_iters=5, seed=0)
print(f"UBM log-likelihood {ubm.loglik_history[0]:.0f} -> {ubm.loglik_history[-1]:.0f}")
print(f"TV objective {tv.objective_history[0]:.1f} -> {tv.objective_history[-1]:.1f}")


def ivec_of(path):
    x = feats.get(path)
    if x is None:
        x = features.pipeline(audio.read_wav(path))
    return ivector.extract_ivector(ubm, tv, ivector.accumulate_stats(ubm, x))


# 3. Mixtures. The reference utterance differs from the one in the mixture.
train_mix = audio.simulate_corpus(train_spk, 60, seed=0)
test_mix = audio.simulate_corpus(test_spk, 12, seed=2)
train_set = Tr.segment_dataset(train_mix, [ivec_of(r.reference_utterance) for r in train_mix], seconds=1.0)
print(f"{len(train_set)} one-second training segments")

# 4. A small network trained for a few epochs.
cfg = Mo.TseNetConfig(M=32, L=20, N=32, O=64, P=3, b=3, r=2, D1=16, D2=8)
net = Mo.build(cfg, seed=0)
print(f"network has {net.parameter_count():,} parameters")
net, history = Tr.train(net, train_set[:-8], train_set[-8:],
                        Tr.TrainConfig(lr_init=5e-3, batch_size=4, max_epochs=5, seed=0))
for row in history:
    print(f"  epoch {row['epoch']}: train {row['train_loss']:.2f}  dev {row['dev_loss']:.2f}  lr {row['lr']:g}")

# 5. Extract and score the held-out mixtures.
pairs = []
for r in test_mix:
    est = Mo.extract(net, r.mixture.samples, ivec_of(r.reference_utterance))
    pairs.append((r, est))
report = metrics.evaluate_pairs(
    [{"id": r.id, "est": est, "mixture": r.mixture.samples, "target": r.target_source.samples,
      "interferences": [s.samples for s in r.interference_sources], "gender_pair": r.gender_pair,
      "snr_db": r.snr_db} for r, est in pairs], taps=32)
print(report.format_tables(f"{net.parameter_count() / 1e3:.0f}K"))
