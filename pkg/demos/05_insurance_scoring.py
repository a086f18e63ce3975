"""Insurance risk scoring: one-hot Base features vs encoder-embedding Replacement.

The generator plants an anamnesis-dependent claim risk and hides a slice of
the code catalog before a cutoff month. At this toy scale the per-code Base
scheme usually stays ahead; the embedding scheme needs a sparser catalog,
fewer training rows and a larger encoder before it pays off (the acceptance
suite exercises exactly that regime). The point here is the workflow: derive
a schema on training months only, pick lambda on the last of them, then read
monthly AUC and drift on the later months.
"""

import numpy as np

from ehrseq.corpus import build_vocabulary, encode_history, filter_corpus
from ehrseq.embedding import average_group_embedding
from ehrseq.encoder import EncoderModel, ModelConfig, train
from ehrseq.scoring import (
    EmbeddingSource,
    assemble_features,
    monthly_eval,
    psi,
    ridge_predict,
    select_lambda,
)
from ehrseq.synthetic import corpus_groups, generate_synthetic_corpus, generate_synthetic_insurance

MONTHS = 8
TRAIN_MONTHS = 4  # fit on months 0-3, validate on 4-7

# ----------------------
# 1. Patient corpus -> encoder (the replacement scheme's backbone)
# ----------------------

patients = generate_synthetic_corpus(seed=31, n_patients=2000, n_codes=200)
kept, _ = filter_corpus(patients)
vocab = build_vocabulary(kept)
config = ModelConfig.desk_scale(len(vocab), d=32, epochs=3, seed=0)
model = EncoderModel.build(config, vocab.sha256())
train(model, [encode_history(p, vocab, H=config.H) for p in kept], log=print)

group_table = average_group_embedding(model, kept, vocab, strategy="mean")
source = EmbeddingSource(model, vocab, group_table, strategy="mean")

# ----------------------
# 2. Applications whose claim risk depends on recorded disease burden
# ----------------------

risk_groups = list(corpus_groups(200)[0].prefixes)
apps = generate_synthetic_insurance(seed=32, patients=kept, n_apps=10000,
                                    months=MONTHS, risk_groups=risk_groups)
months = np.array([r.month for r in apps])
labels = np.array([r.claim for r in apps], dtype=np.float64)
print(f"\n{len(apps)} applications, claim rate {labels.mean():.3f}, "
      f"risk prefixes {risk_groups}")

train_rec = [r for r in apps if r.month < TRAIN_MONTHS]
val_rec = [r for r in apps if r.month >= TRAIN_MONTHS]
y_tr = np.array([r.claim for r in train_rec], dtype=np.float64)
y_va = np.array([r.claim for r in val_rec], dtype=np.float64)
m_va = np.array([r.month for r in val_rec])

# ----------------------
# 3. Fit both schemes; lambda picked on the last training month
# ----------------------

inner = np.array([r.month for r in train_rec]) < TRAIN_MONTHS - 1
for scheme in ("base", "replacement"):
    X_tr, schema = assemble_features(train_rec, scheme, embedding_source=source)
    X_va, _ = assemble_features(val_rec, scheme, schema=schema, embedding_source=source)
    model_s, aucs = select_lambda(X_tr[inner], y_tr[inner], X_tr[~inner], y_tr[~inner],
                                  schema_hash=schema.sha256())
    scores = ridge_predict(model_s, X_va, schema)
    report = monthly_eval(scores, y_va, m_va)
    print(f"\n{scheme} (dim {X_tr.shape[1]}, lambda {model_s.lam:g}):")
    for month, auc, n in report.cells:
        print(f"  month {month}: auc={auc:.4f} (n={n})")
    print(f"  average auc: {report.average:.4f}")

    # drift of validation scores vs the training population
    ref = ridge_predict(model_s, X_tr, schema)
    print(f"  psi(train -> validation): {psi(ref, scores):.4f}")
