"""Embedding-space tour: token neighbors, demographic averages, risk curves.

Trains a throwaway encoder first; swap in load_checkpoint(...) if you saved
one from 02_train_encoder.py with a matching vocabulary.
"""

from ehrseq.corpus import build_vocabulary, encode_history, filter_corpus
from ehrseq.embedding import (
    average_group_embedding,
    export_vectors,
    nearest_tokens,
    patient_embeddings,
    read_vectors,
    risk_curve,
)
from ehrseq.encoder import EncoderModel, ModelConfig, train
from ehrseq.synthetic import corpus_groups, generate_synthetic_corpus

patients = generate_synthetic_corpus(seed=11, n_patients=2500, n_codes=200)
kept, _ = filter_corpus(patients)
vocab = build_vocabulary(kept)
config = ModelConfig.desk_scale(len(vocab), epochs=6, seed=0)
model = EncoderModel.build(config, vocab.sha256())
train(model, [encode_history(p, vocab, H=config.H) for p in kept], log=print)

# ----------------------
# 1. Who lives near a code in the static token table?
# ----------------------

query = vocab.token(vocab.icd_ids[0])
print(f"\nnearest diagnosis tokens to {query}:")
for code, sim in nearest_tokens(model, vocab, query, top_n=5, restrict="icd"):
    print(f"  {code}: {sim:.3f}")

# age tokens pick up the ordering of ages from co-occurrence alone
print("nearest age tokens to [AGE_40]:")
for tok, sim in nearest_tokens(model, vocab, "[AGE_40]", top_n=5, restrict="age"):
    print(f"  {tok}: {sim:.3f}")

# ----------------------
# 2. Pooled patient vectors and demographic averages
# ----------------------

embs = patient_embeddings(model, kept[:200], vocab, strategy="mean")
print(f"\nembedded {len(embs)} patients, dim={embs[0].vector.shape[0]}")

table = average_group_embedding(model, kept, vocab, strategy="mean")
print("patients per (gender, decade):")
print("  M:", table.decade_counts[0].tolist())
print("  F:", table.decade_counts[1].tolist())

# ----------------------
# 3. Risk curve: P(next code in group) by age
# ----------------------

# pick a group the generator gates by age, so the curve has a shape to show
gated = max(corpus_groups(200), key=lambda g: g.age_low)
print(f"\ngroup {gated.name} ({gated.prefixes}) is emitted at ages "
      f"{gated.age_low}-{gated.age_high}")
curve = dict(risk_curve(model, vocab, gated.prefixes[0]))
for age in (10, 30, 50, 70, 90):
    bar = "#" * int(curve[age] * 400)
    print(f"  age {age:>2}: {curve[age]:.4f} {bar}")

# ----------------------
# 4. TSV export round-trip (loads into any embedding projector)
# ----------------------

rows = [(e.patient_id, "patient", e.vector) for e in embs]
export_vectors(rows, "/tmp/demo_vectors.tsv")
names, kinds, mat = read_vectors("/tmp/demo_vectors.tsv")
print(f"\nwrote and re-read {len(names)} vectors, shape {mat.shape}")
