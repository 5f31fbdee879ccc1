#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "compatfam/dataset.hpp"
#include "compatfam/graph.hpp"
#include "compatfam/rng.hpp"
#include "compatfam/tensor.hpp"

namespace compatfam {

enum class CompatMode { Pcd, L2 };

struct CompatConfig {
    CompatMode mode = CompatMode::Pcd;
    int k = 2;                        // prototype count (PCD mode)
    int n = 20;                       // latent size per projection
    std::vector<int> trunk = {64, 64};
    double lambda_m = 0.0;
    std::int64_t input_dim = 0;
    std::int64_t img_h = 0;  // kept for sample/export plumbing; 0 if not images
    std::int64_t img_w = 0;

    void validate() const;
    /// Number of output heads: K+1 in PCD mode, 1 in L2 mode.
    int head_count() const { return mode == CompatMode::Pcd ? k + 1 : 1; }
    /// Latent width of one head: N in PCD mode, (K+1)*N in L2 mode.
    std::int64_t head_dim() const {
        return mode == CompatMode::Pcd ? n : static_cast<std::int64_t>(k + 1) * n;
    }
};

/// One item's embedding plus its K compatible prototypes.
struct FamilyEmbedding {
    Tensor e0;          // [1, N]
    Tensor prototypes;  // [K, N]
};

/// Shared-trunk encoder with K+1 affine heads and the learnable sigmoid
/// shift c. Parameters live in an ordered name->tensor map so optimizer
/// iteration order is deterministic.
struct CompatModel {
    CompatConfig config;
    std::map<std::string, Tensor> params;
    int epochs_trained = 0;

    static CompatModel init(const CompatConfig& cfg, std::uint64_t seed);

    /// Trunk activations then all heads, via the graph engine (the same
    /// builder the training loss uses). Returns head_count() tensors [B, head_dim].
    std::vector<Tensor> encode_batch(const Tensor& x) const;
    FamilyEmbedding encode_family(const Tensor& item_row) const;
    double shift_c() const { return params.at("c")[0]; }
};

struct PcdResult {
    double d = 0.0;
    std::vector<double> d_k;
    std::vector<double> w_k;
};

/// Projected compatibility distance for one (prototypes, candidate) pair.
/// Softmin weights use min-subtraction before exponentiation; the result is
/// algebraically identical and immune to overflow for large distances.
PcdResult pcd(const Tensor& prototypes, const Tensor& e0_y);

/// P(compatible) = 1 / (1 + exp(d - c)); strictly decreasing in d.
double pair_probability(double d, double c);

/// Graph node bundle for the pairwise training loss. Inputs:
///   x, y        [B, input_dim]   query / candidate rows
///   w_pos,w_neg [B, 1]           per-pair weight masked by label side
///   inv_wpos    [1, 1]           1/sum(w_pos), or 0 to omit the term
///   inv_wneg    [1, 1]           1/sum(w_neg), or 0 to omit the term
struct CompatLossGraph {
    std::unique_ptr<Graph> g;
    NodeId loss = -1;           // L = L_ce + lambda_m * mean_pos d
    NodeId sum_pos_logp = -1;   // sum over rows of w_pos * log P
    NodeId sum_neg_log1mp = -1; // sum over rows of w_neg * log(1-P)
    NodeId sum_pos_d = -1;      // sum over rows of w_pos * d
    NodeId prob = -1;           // [B,1] clamped probabilities
    NodeId dist = -1;           // [B,1] distances
    std::int64_t batch = 0;
};

CompatLossGraph build_compat_loss_graph(const CompatConfig& cfg, std::int64_t batch);

/// Encoder-only graph: input "x" [B,input_dim], one output per head.
struct CompatEncodeGraph {
    std::unique_ptr<Graph> g;
    std::vector<NodeId> heads;
    std::int64_t batch = 0;
};

CompatEncodeGraph build_compat_encode_graph(const CompatConfig& cfg, std::int64_t batch);

/// Appends the shared trunk + heads for one input to an existing graph.
/// Parameter leaves are created on first use under `param_prefix` and reused
/// afterwards. When `detach_outputs` is set every head is wrapped in a
/// detach node (used when the encoder must stay frozen).
std::vector<NodeId> append_compat_encoder(Graph& g, const CompatConfig& cfg, NodeId x,
                                          const std::string& param_prefix, bool detach_outputs);

struct BatchLoss {
    double loss = 0.0;
    double l_ce = 0.0;
    double l_metric = 0.0;  // lambda_m * mean_pos d
    std::int64_t n_pos = 0;
    std::int64_t n_neg = 0;
    bool pos_term_omitted = false;
    bool neg_term_omitted = false;
};

struct PairBatch {
    Tensor x;  // [B, d]
    Tensor y;  // [B, d]
    std::vector<int> labels;
    std::vector<double> weights;  // empty = all ones
};

PairBatch make_batch(const FeatureSet& items, const PairSet& pairs,
                     const std::vector<std::int64_t>& pair_indices);

/// One-shot pairwise loss evaluation (builds a graph for this batch size).
BatchLoss batch_loss(const CompatModel& model, const PairBatch& batch);

// Checkpoint container: magic "CFAM", version, config block, named tensors
// stored as 32-bit little-endian floats.
void save_checkpoint(const CompatModel& model, const std::string& path);
CompatModel load_checkpoint(const std::string& path);

/// CSV export: header id,e0_0..e0_{N-1},p1_0..pK_{N-1} (PCD mode).
void export_embeddings_csv(const CompatModel& model, const FeatureSet& items,
                           const std::string& path);

// Shared binary-io helpers (also used by the GAN checkpoint).
namespace ckpt {
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_f32(std::ostream& out, float v);
void write_tensor(std::ostream& out, const std::string& name, const Tensor& t);
std::uint16_t read_u16(std::istream& in);
std::uint32_t read_u32(std::istream& in);
float read_f32(std::istream& in);
std::pair<std::string, Tensor> read_tensor(std::istream& in);
}  // namespace ckpt

}  // namespace compatfam
