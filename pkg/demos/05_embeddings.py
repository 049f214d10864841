"""What pretraining does to the embedding, before any label is seen.

Pairs of visits of the same region are grouped by how much their label
changed; a useful encoder places visits with larger changes further apart.
Also prints the PCA variance split and the within-patient rank correlation.
"""
from chronocon.analysis import (analyze_embeddings, bucket_medians, similarity_vs_scorediff,
                                within_group_rank_correlation)
from chronocon.synthetic import CohortConfig, generate
from chronocon.training import TrainConfig, init_model, pretrain

cohort, _ = generate(CohortConfig(reader_noise_prob=0.0, noise_sigma=0.0, seed=0))
cfg = TrainConfig.desk()

for name, model in (("untrained", init_model(cohort, cfg)), ("chrono", pretrain(cohort, "chrono", False, cfg))):
    medians = bucket_medians(similarity_vs_scorediff(model, cohort, "test"))
    summary = analyze_embeddings(model, cohort, "test")
    print(name)
    print("  median similarity by label change:", {k: round(v, 3) for k, v in medians.items()})
    print("  PCA explained variance:", [round(float(x), 3) for x in summary["explained_variance"]])
    print("  within-patient rank correlation:", round(within_group_rank_correlation(model, cohort, "test"), 3))
