#include "compatfam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

namespace compatfam {

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw DataError("auc: scores/labels empty or mismatched");
    std::int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l > 0 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) throw DataError("auc: need both classes present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks within tied groups, then the Mann-Whitney identity.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] > 0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double error_rate(const std::vector<double>& probabilities, const std::vector<int>& labels,
                  double threshold) {
    if (probabilities.size() != labels.size() || probabilities.empty())
        throw DataError("error_rate: inputs empty or mismatched");
    std::int64_t wrong = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const bool predicted_pos = probabilities[i] >= threshold;
        const bool is_pos = labels[i] > 0;
        if (predicted_pos != is_pos) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(probabilities.size());
}

// ---------------------------------------------------------------------------
// Retrieval

CandidateIndex build_candidate_index(const CompatModel& model, const FeatureSet& candidates) {
    if (candidates.size() == 0) throw DataError("index: no candidates");
    CandidateIndex idx;
    idx.ids = candidates.ids;
    idx.e0 = model.encode_batch(candidates.x)[0];
    return idx;
}

namespace {

Tensor query_prototypes(const CompatModel& model, const FeatureSet& items, std::int64_t query_id) {
    const auto row = items.index_of(query_id);
    return model.encode_family(items.x.row_copy(row)).prototypes;
}

void sort_and_trim(RankedList& list, int top_n) {
    std::sort(list.entries.begin(), list.entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.candidate_id < b.candidate_id;
    });
    if (top_n > 0 && static_cast<int>(list.entries.size()) > top_n)
        list.entries.resize(static_cast<std::size_t>(top_n));
}

}  // namespace

RankedList recommend_exact(const CompatModel& model, const FeatureSet& items,
                           std::int64_t query_id, const CandidateIndex& index, int top_n) {
    if (index.ids.empty()) throw DataError("recommend: empty index");
    const Tensor protos = query_prototypes(model, items, query_id);

    RankedList list;
    list.query_id = query_id;
    const auto n = static_cast<std::int64_t>(index.ids.size());
    list.entries.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const auto r = pcd(protos, index.e0.row_copy(i));
        list.entries.push_back({index.ids[static_cast<std::size_t>(i)], -r.d});
    }
    sort_and_trim(list, top_n);
    return list;
}

RankedList recommend_approx(const CompatModel& model, const FeatureSet& items,
                            std::int64_t query_id, const CandidateIndex& index, int top_n) {
    if (index.ids.empty()) throw DataError("recommend: empty index");
    const Tensor protos = query_prototypes(model, items, query_id);
    const std::int64_t K = protos.rows();
    const std::int64_t N = protos.cols();
    const auto n = static_cast<std::int64_t>(index.ids.size());
    const int keep = top_n > 0 ? top_n : static_cast<int>(n);

    // One nearest-neighbor scan per prototype, run concurrently over the
    // read-only index. Each returns its top `keep` candidates by d_k.
    std::vector<std::vector<std::pair<std::int64_t, double>>> per_k(static_cast<std::size_t>(K));
    auto scan = [&](std::int64_t k) {
        std::vector<std::pair<double, std::int64_t>> best;  // (d_k, row)
        best.reserve(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            double d = 0.0;
            for (std::int64_t j = 0; j < N; ++j) {
                const double diff = protos.at(k, j) - index.e0.at(i, j);
                d += diff * diff;
            }
            best.emplace_back(d, i);
        }
        const auto limit = std::min<std::int64_t>(keep, n);
        std::partial_sort(best.begin(), best.begin() + limit, best.end(),
                          [&](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first < b.first;
                              return index.ids[static_cast<std::size_t>(a.second)] <
                                     index.ids[static_cast<std::size_t>(b.second)];
                          });
        auto& out = per_k[static_cast<std::size_t>(k)];
        for (std::int64_t i = 0; i < limit; ++i)
            out.emplace_back(best[static_cast<std::size_t>(i)].second,
                             best[static_cast<std::size_t>(i)].first);
    };
    {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(K));
        for (std::int64_t k = 0; k < K; ++k) threads.emplace_back(scan, k);
        for (auto& t : threads) t.join();
    }

    // Merge: min over the observed d_k per candidate. Deterministic
    // regardless of thread completion order.
    std::unordered_map<std::int64_t, double> min_d;  // row -> min d_k
    for (const auto& lst : per_k)
        for (const auto& [row, d] : lst) {
            auto it = min_d.find(row);
            if (it == min_d.end() || d < it->second) min_d[row] = d;
        }

    RankedList list;
    list.query_id = query_id;
    list.entries.reserve(min_d.size());
    for (const auto& [row, d] : min_d)
        list.entries.push_back({index.ids[static_cast<std::size_t>(row)], -d});
    sort_and_trim(list, keep);
    return list;
}

// ---------------------------------------------------------------------------
// Symmetric-scorer bound

double symmetric_auc_bound(const RelationSpec& relation) {
    relation.validate();
    const int C = relation.num_classes;
    if (C > 12) throw ConfigError("symmetric_auc_bound: exhaustive evaluation limited to C <= 12");

    // Directed positive/negative instance counts per unordered class pair.
    struct PairCount {
        double pos = 0, neg = 0;
    };
    std::vector<PairCount> pairs;
    for (int a = 0; a < C; ++a) {
        for (int b = a; b < C; ++b) {
            PairCount pc;
            if (a == b) {
                (relation.positive(a, a) ? pc.pos : pc.neg) += 1;
            } else {
                (relation.positive(a, b) ? pc.pos : pc.neg) += 1;
                (relation.positive(b, a) ? pc.pos : pc.neg) += 1;
            }
            pairs.push_back(pc);
        }
    }

    // A symmetric scorer assigns one score per unordered pair, so the
    // achievable maximum orders pairs by pos:neg ratio; equal ratios tie
    // harmlessly. Within a pair the pos-vs-neg comparisons are forced ties.
    std::sort(pairs.begin(), pairs.end(), [](const PairCount& x, const PairCount& y) {
        return x.pos * y.neg > y.pos * x.neg;  // descending pos/neg ratio
    });

    double total_pos = 0, total_neg = 0;
    for (const auto& p : pairs) {
        total_pos += p.pos;
        total_neg += p.neg;
    }
    if (total_pos == 0 || total_neg == 0)
        throw DataError("symmetric_auc_bound: relation yields a single class");

    double numer = 0.0;
    double neg_below = total_neg;
    for (const auto& p : pairs) {
        neg_below -= p.neg;
        numer += p.pos * neg_below;  // strict wins against lower-ranked pairs
        numer += 0.5 * p.pos * p.neg;  // forced ties within the unordered pair
    }
    return numer / (total_pos * total_neg);
}

// ---------------------------------------------------------------------------
// CSV

void save_metrics_csv(const std::vector<std::pair<std::string, double>>& metrics,
                      const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "metric,value\n";
    for (const auto& [k, v] : metrics) f << k << "," << v << "\n";
    if (!f) throw IoError("failed writing " + path);
}

void save_rankings_csv(const std::vector<RankedList>& rankings, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "query_id,rank,candidate_id,score\n";
    for (const auto& r : rankings) {
        int rank = 1;
        for (const auto& e : r.entries) f << r.query_id << "," << rank++ << "," << e.candidate_id
                                          << "," << e.score << "\n";
    }
    if (!f) throw IoError("failed writing " + path);
}

}  // namespace compatfam
