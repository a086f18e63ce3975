"""Generate a synthetic patient corpus and look at what is in it."""

from collections import Counter

from ehrseq.corpus import build_vocabulary, decode_tokens, encode_history, filter_corpus, group_visits
from ehrseq.synthetic import corpus_groups, generate_synthetic_corpus

SEED = 7
N_PATIENTS = 1000
N_CODES = 200

# ----------------------
# 1. Generate
# ----------------------

patients = generate_synthetic_corpus(SEED, N_PATIENTS, N_CODES)
n_events = sum(len(p.events) for p in patients)
print(f"patients: {len(patients)}, events: {n_events}, "
      f"mean events/patient: {n_events / len(patients):.1f}")

genders = Counter(p.gender for p in patients)
print(f"gender split: {dict(genders)}")

# the generator assigns each patient to age-gated diagnosis groups
for g in corpus_groups(N_CODES)[:4]:
    print(f"  group {g.name}: prefixes={g.prefixes} ages {g.age_low}-{g.age_high} "
          f"female_share={g.female_share}")

# ----------------------
# 2. Filter rare codes and short histories
# ----------------------

kept, stats = filter_corpus(patients)
print(f"\nafter filtering: {len(kept)} patients "
      f"(dropped {stats.dropped_patients} patients, removed {stats.removed_codes} codes "
      f"in {stats.passes} passes)")

# ----------------------
# 3. Vocabulary
# ----------------------

vocab = build_vocabulary(kept)
print(f"vocabulary size: {len(vocab)} "
      f"(8 reserved + 2 genders + 100 ages + {len(vocab) - 110} codes)")

freq = Counter(e.code for p in kept for e in p.events)
print("top codes:", freq.most_common(8))

# ----------------------
# 4. One patient, as the model sees it
# ----------------------

p = kept[0]
print(f"\npatient {p.patient_id}: gender={p.gender} age={p.age_years}")
for visit in group_visits(p)[:5]:
    print(f"  {visit.date}: {visit.codes}")

sample = encode_history(p, vocab, H=48)
print("encoded:", decode_tokens(sample, vocab)[: sample.length])
