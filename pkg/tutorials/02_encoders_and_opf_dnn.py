"""Small end-to-end run: dataset, encoders, OPF-DNN variants, metrics.

Uses 60 load factors and 150 epochs so it finishes in about ten seconds.
The ``pipeline`` command runs the full desk configuration.
"""

from gridembed.cli import evaluate_bundle
from gridembed.dataset import DatasetConfig, generate_dataset
from gridembed.embedding import EmbeddingConfig
from gridembed.encoders import train_encoder
from gridembed.grid import load_bundled
from gridembed.neural import TrainConfig
from gridembed.opfdnn import Bundle, train_opf_dnn, train_voltage_head

net, loads = load_bundled("case14")
ds = generate_dataset(net, loads, DatasetConfig(max_instances=60), EmbeddingConfig())
print(f"{len(ds.instances)} instances: {len(ds.train)} train / {len(ds.validation)} validation")

cfg = TrainConfig(lr=0.01, epochs=150, seed=0)
enc, hist = train_encoder(ds, "full", cfg)
print(f"FullNN encoder {enc.input_dim} -> {enc.output_dim} dims, validation MSE {hist.val[-1]:.5f}")

for encoder in (None, enc):
    model, _ = train_opf_dnn(ds, encoder, cfg)
    head, _ = train_voltage_head(ds, model, cfg, target="gen_vm")
    bus, _ = train_voltage_head(ds, model, cfg, target="bus")
    scores = evaluate_bundle(Bundle(model, {"gen_vm": head, "bus": bus}, {}, {}), ds.validation)
    print(f"{model.variant:>5}: {model.parameter_count()} parameters, "
          + ", ".join(f"{k} {v:.4f}" for k, v in scores.items()))
