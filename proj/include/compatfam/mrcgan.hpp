#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "compatfam/compat.hpp"
#include "compatfam/dataset.hpp"
#include "compatfam/graph.hpp"
#include "compatfam/rng.hpp"

namespace compatfam {

struct GanConfig {
    int z_dim = 20;
    int k = 2;  // must match the frozen compat model
    double lambda_gp = 0.5;
    double lambda_dra = 0.5;
    double m_enc = 0.1;
    double m_prj = -1.0;  // < 0: set to 1.2x mean positive-pair distance at training time
    double learning_rate = 0.0002;
    double beta1 = 0.5;
    double beta2 = 0.999;
    int batch_size = 64;
    std::vector<int> g_widths = {64, 64};
    std::vector<int> d_widths = {64, 64};
    bool out_sigmoid = true;  // images live in [0,1]; point-cloud toys are unbounded

    void validate() const;
};

/// Generator G(z, cond) and two-headed discriminator (D(y), Q_0(y)).
/// Parameters carry "g." / "d." prefixes in one ordered map.
struct GanModel {
    GanConfig cfg;
    std::int64_t item_dim = 0;
    std::int64_t cond_dim = 0;
    std::int64_t img_h = 0, img_w = 0;
    std::map<std::string, Tensor> params;

    static GanModel init(const GanConfig& cfg, std::int64_t item_dim, std::int64_t cond_dim,
                         std::uint64_t seed);

    Tensor generate(const Tensor& z, const Tensor& cond) const;
    struct DOut {
        Tensor realness;  // [B,1]
        Tensor q0;        // [B,N]
    };
    DOut discriminate(const Tensor& y) const;
};

/// batch + lambda_dra * batch.stddev() * U[0,1]; stddev is one scalar over
/// the whole batch and the uniform draw is fresh per element.
Tensor dragan_perturb(const Tensor& batch, double lambda_dra, Rng& rng);

struct GanTerms {
    double l_real = 0, l_enc = 0, l_prj = 0, l_gp = 0;
    double omega_c = 0, omega_enc = 0, omega_prj = 0;
    double l_g = 0, l_d = 0;
};

/// Full loss graph for one training step. The compat encoder is embedded
/// with detached outputs; the generator branch sees detached discriminator
/// parameters and the discriminator branch sees detached generator samples,
/// so cross-gradients are structurally zero.
struct GanLossGraph {
    std::unique_ptr<Graph> g;
    NodeId l_d = -1, l_g = -1;
    NodeId l_real = -1, l_enc = -1, l_prj = -1, l_gp = -1;
    NodeId omega_c = -1, omega_enc = -1, omega_prj = -1;
    std::vector<std::string> d_params, g_params, cm_params;
    std::vector<NodeId> d_grads, g_grads;  // aligned with d_params / g_params
    std::int64_t batch = 0;
};

GanLossGraph build_gan_loss_graph(const GanConfig& cfg, const CompatConfig& compat_cfg,
                                  std::int64_t batch);

/// DRAGAN penalty appended to an existing graph: lambda_gp * mean over rows
/// of (||grad_yhat d_out|| - 1)^2, where d_out is [B,1] and rows of yhat are
/// independent. Exercises double backprop when the result is differentiated.
NodeId append_gradient_penalty(Graph& g, NodeId d_out, NodeId yhat, double lambda_gp);

/// One-shot loss evaluation (fresh z inside via rng), mainly for tests.
GanTerms gan_losses(const GanModel& gan, const CompatModel& compat, const Tensor& y_real,
                    const Tensor& x_query, const Tensor& x_neg, const Tensor& y_neg, Rng& rng);

/// Mean over positive pairs of sqrt(PCD distance) in the trained space;
/// the m_prj default is 1.2x this value.
double mean_positive_pair_distance(const CompatModel& model, const FeatureSet& items,
                                   const PairSet& pairs);

struct GanTrainOptions {
    int steps = 5000;
    std::uint64_t seed = 0;
    std::string curves_csv;      // empty: do not write
    std::string sample_dir;      // empty: no periodic grids
    int sample_every = 1000;
    int curve_every = 10;
};

struct GanCurvePoint {
    int step;
    GanTerms terms;
};

/// Alternating single-D / single-G steps; batches and noise drawn from the
/// seeded rng. Requires the compat model to have been trained with
/// lambda_m > 0. Negative pairs for the projection repeller come from the
/// labeled pairs. Returns per-step curve samples.
std::vector<GanCurvePoint> train_mrcgan(GanModel& gan, const CompatModel& compat,
                                        const FeatureSet& items, const PairSet& pairs,
                                        const GanTrainOptions& opts);

/// count samples conditioned on prototype k (1-based) of the query item,
/// fresh z per sample.
Tensor sample_compatible(const GanModel& gan, const CompatModel& compat, const FeatureSet& items,
                         std::int64_t query_id, int k, int count, Rng& rng);

/// Style mode: condition on E_0 of the query item itself.
Tensor sample_style(const GanModel& gan, const CompatModel& compat, const FeatureSet& items,
                    std::int64_t query_id, int count, Rng& rng);

void save_gan_checkpoint(const GanModel& gan, const std::string& path);
GanModel load_gan_checkpoint(const std::string& path);

void save_curves_csv(const std::vector<GanCurvePoint>& curves, const std::string& path);

}  // namespace compatfam
