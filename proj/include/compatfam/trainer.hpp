#pragma once

#include <map>
#include <string>
#include <vector>

#include "compatfam/compat.hpp"
#include "compatfam/dataset.hpp"

namespace compatfam {

struct TrainConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 100;
    int epochs = 50;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::int64_t t = 0;
};

/// One Adam update with bias correction. Throws on non-finite gradients.
void adam_step(AdamState& state, std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, const TrainConfig& cfg);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auc = 0.0;
};

struct EvalStats {
    double loss = 0.0;
    double l_ce = 0.0;
    double auc = 0.0;
    double error_rate = 0.0;
};

struct TrainResult {
    CompatModel best;
    CompatModel last;
    std::vector<EpochStats> history;
    int best_epoch = -1;  // -1 when history is empty
    bool diverged = false;
};

/// Mini-batch training with per-epoch validation; returns the checkpoint of
/// the epoch with minimum validation loss (earliest on ties). Shuffling and
/// init are fully determined by cfg.seed. On divergence (non-finite loss)
/// training stops and the last finite best checkpoint is returned with the
/// diverged flag set.
TrainResult train_compat(const CompatModel& init, const FeatureSet& train_items,
                         const PairSet& train_pairs, const FeatureSet& val_items,
                         const PairSet& val_pairs, const TrainConfig& cfg);

/// Full-split loss/AUC/error-rate with exact set-level means (aggregated in
/// batches but normalized over the whole split).
EvalStats evaluate_pairs(const CompatModel& model, const FeatureSet& items, const PairSet& pairs,
                         int batch_size = 256);

void save_history_csv(const std::vector<EpochStats>& history, const std::string& path,
                      bool append = false);
std::vector<EpochStats> load_history_csv(const std::string& path);

}  // namespace compatfam
