#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "compatfam/compat.hpp"
#include "compatfam/dataset.hpp"

namespace compatfam {

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted 0.5. Rank-based O(n log n); matches the brute-force
/// pairwise count exactly, ties included.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Fraction of pairs where (P >= threshold) disagrees with the label.
double error_rate(const std::vector<double>& probabilities, const std::vector<int>& labels,
                  double threshold = 0.5);

struct RankedEntry {
    std::int64_t candidate_id;
    double score;  // negative distance; non-increasing down the list
};

struct RankedList {
    std::int64_t query_id = -1;
    std::vector<RankedEntry> entries;
};

/// Precomputed candidate embeddings for retrieval.
struct CandidateIndex {
    std::vector<std::int64_t> ids;
    Tensor e0;  // [n, N]
};

CandidateIndex build_candidate_index(const CompatModel& model, const FeatureSet& candidates);

/// Full-PCD ranking over all candidates; ascending distance, id tie-break.
RankedList recommend_exact(const CompatModel& model, const FeatureSet& items,
                           std::int64_t query_id, const CandidateIndex& index, int top_n);

/// K per-prototype nearest-neighbor scans run in parallel, merged by
/// min_k d_k. Scores are -min_k d_k; the union of the per-prototype top-n
/// lists provably contains the true top-n under that score.
RankedList recommend_approx(const CompatModel& model, const FeatureSet& items,
                            std::int64_t query_id, const CandidateIndex& index, int top_n);

/// Largest class-level AUC any symmetric scorer can reach on the modular
/// relation: every unordered class pair gets one score, so a pair that is
/// positive in exactly one direction forces a 0.5-tie between its two
/// directed instances. Exhaustive over the C x C class table.
double symmetric_auc_bound(const RelationSpec& relation);

void save_metrics_csv(const std::vector<std::pair<std::string, double>>& metrics,
                      const std::string& path);
void save_rankings_csv(const std::vector<RankedList>& rankings, const std::string& path);

}  // namespace compatfam
