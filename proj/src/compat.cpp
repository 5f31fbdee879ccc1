#include "compatfam/compat.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace compatfam {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbCeil = 1.0 - 1e-12;
constexpr double kLreluAlpha = 0.2;
}  // namespace

void CompatConfig::validate() const {
    if (mode == CompatMode::Pcd && k < 1) throw ConfigError("compat: K must be >= 1 in PCD mode");
    if (n < 1) throw ConfigError("compat: N must be >= 1");
    if (lambda_m < 0) throw ConfigError("compat: lambda_m must be >= 0");
    if (input_dim < 1) throw ConfigError("compat: input_dim must be set");
    for (int w : trunk)
        if (w < 1) throw ConfigError("compat: trunk widths must be positive");
}

// ---------------------------------------------------------------------------
// Model init / encode

CompatModel CompatModel::init(const CompatConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CompatModel m;
    m.config = cfg;
    Rng rng(seed);

    auto dense = [&](const std::string& name, std::int64_t in, std::int64_t out) {
        Tensor w = Tensor::zeros(in, out);
        const double s = std::sqrt(2.0 / static_cast<double>(in));
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, s);
        m.params[name + ".W"] = std::move(w);
        m.params[name + ".b"] = Tensor::zeros(1, out);
    };

    std::int64_t in = cfg.input_dim;
    for (std::size_t l = 0; l < cfg.trunk.size(); ++l) {
        dense("trunk" + std::to_string(l), in, cfg.trunk[l]);
        in = cfg.trunk[l];
    }
    for (int h = 0; h < cfg.head_count(); ++h)
        dense("head" + std::to_string(h), in, cfg.head_dim());
    // Shift parameter of the pair probability; any positive init works.
    m.params["c"] = Tensor::scalar(1.0);
    return m;
}

std::vector<NodeId> append_compat_encoder(Graph& g, const CompatConfig& cfg, NodeId x,
                                          const std::string& param_prefix, bool detach_outputs) {
    auto leaf = [&](const std::string& name, std::int64_t r, std::int64_t c) {
        try {
            return g.leaf(param_prefix + name);
        } catch (const BindError&) {
            return g.param(param_prefix + name, r, c);
        }
    };

    const std::int64_t batch = g.shape_of(x).r;
    NodeId h = x;
    std::int64_t in = cfg.input_dim;
    for (std::size_t l = 0; l < cfg.trunk.size(); ++l) {
        const std::int64_t out = cfg.trunk[l];
        NodeId w = leaf("trunk" + std::to_string(l) + ".W", in, out);
        NodeId b = leaf("trunk" + std::to_string(l) + ".b", 1, out);
        h = g.leaky_relu(g.add(g.matmul(h, w), g.expand(b, batch, out)), kLreluAlpha);
        in = out;
    }
    std::vector<NodeId> heads;
    for (int hd = 0; hd < cfg.head_count(); ++hd) {
        const std::int64_t out = cfg.head_dim();
        NodeId w = leaf("head" + std::to_string(hd) + ".W", in, out);
        NodeId b = leaf("head" + std::to_string(hd) + ".b", 1, out);
        NodeId e = g.add(g.matmul(h, w), g.expand(b, batch, out));
        heads.push_back(detach_outputs ? g.detach(e) : e);
    }
    return heads;
}

CompatEncodeGraph build_compat_encode_graph(const CompatConfig& cfg, std::int64_t batch) {
    CompatEncodeGraph eg;
    eg.g = std::make_unique<Graph>();
    eg.batch = batch;
    NodeId x = eg.g->input("x", batch, cfg.input_dim);
    eg.heads = append_compat_encoder(*eg.g, cfg, x, "", false);
    return eg;
}

std::vector<Tensor> CompatModel::encode_batch(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != config.input_dim)
        throw ShapeError("encode: expected [*, " + std::to_string(config.input_dim) + "] input");
    auto eg = build_compat_encode_graph(config, x.rows());
    Session s(*eg.g);
    s.bind("x", x);
    for (const auto& [name, t] : params)
        if (name != "c") s.bind(name, t);
    std::vector<Tensor> out;
    out.reserve(eg.heads.size());
    for (NodeId id : eg.heads) out.push_back(s.value(id));
    return out;
}

FamilyEmbedding CompatModel::encode_family(const Tensor& item_row) const {
    if (config.mode != CompatMode::Pcd)
        throw ConfigError("encode_family: model is not in PCD mode");
    auto heads = encode_batch(item_row);
    FamilyEmbedding fe;
    fe.e0 = heads[0];
    fe.prototypes = Tensor::zeros(config.k, config.n);
    for (int k = 0; k < config.k; ++k)
        for (int j = 0; j < config.n; ++j)
            fe.prototypes.at(k, j) = heads[static_cast<std::size_t>(k + 1)].at(0, j);
    return fe;
}

// ---------------------------------------------------------------------------
// PCD math

PcdResult pcd(const Tensor& prototypes, const Tensor& e0_y) {
    const std::int64_t k = prototypes.rows();
    const std::int64_t n = prototypes.cols();
    if (e0_y.numel() != n) throw ShapeError("pcd: latent sizes differ");
    const double* ey = e0_y.data();

    PcdResult r;
    r.d_k.resize(static_cast<std::size_t>(k));
    r.w_k.resize(static_cast<std::size_t>(k));
    double dmin = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double diff = prototypes.at(i, j) - ey[j];
            s += diff * diff;
        }
        r.d_k[static_cast<std::size_t>(i)] = s;
        dmin = (i == 0) ? s : std::min(dmin, s);
    }
    double z = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
        const double w = std::exp(-(r.d_k[static_cast<std::size_t>(i)] - dmin));
        r.w_k[static_cast<std::size_t>(i)] = w;
        z += w;
    }
    for (auto& w : r.w_k) w /= z;

    double d = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
        double proj = 0.0;
        for (std::int64_t i = 0; i < k; ++i)
            proj += r.w_k[static_cast<std::size_t>(i)] * prototypes.at(i, j);
        const double diff = proj - ey[j];
        d += diff * diff;
    }
    r.d = d;
    return r;
}

double pair_probability(double d, double c) {
    if (!std::isfinite(d) || !std::isfinite(c))
        throw NonFiniteError("pair_probability: non-finite input", -1);
    const double x = c - d;
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// ---------------------------------------------------------------------------
// Loss graph

CompatLossGraph build_compat_loss_graph(const CompatConfig& cfg, std::int64_t batch) {
    cfg.validate();
    if (batch < 1) throw ConfigError("loss graph: batch must be >= 1");

    CompatLossGraph lg;
    lg.g = std::make_unique<Graph>();
    lg.batch = batch;
    Graph& g = *lg.g;

    NodeId x = g.input("x", batch, cfg.input_dim);
    NodeId y = g.input("y", batch, cfg.input_dim);
    NodeId w_pos = g.input("w_pos", batch, 1);
    NodeId w_neg = g.input("w_neg", batch, 1);
    NodeId inv_wpos = g.input("inv_wpos", 1, 1);
    NodeId inv_wneg = g.input("inv_wneg", 1, 1);

    auto hx = append_compat_encoder(g, cfg, x, "", false);
    auto hy = append_compat_encoder(g, cfg, y, "", false);

    NodeId dist;
    if (cfg.mode == CompatMode::Pcd) {
        const std::int64_t n = cfg.head_dim();
        NodeId e0y = hy[0];
        // d_k = ||E_k(x) - E_0(y)||^2, one column per prototype.
        NodeId dks = -1;
        std::vector<NodeId> protos;
        for (int k = 1; k <= cfg.k; ++k) {
            NodeId pk = hx[static_cast<std::size_t>(k)];
            protos.push_back(pk);
            NodeId dk = g.row_sum(g.square(g.sub(pk, e0y)));
            dks = (dks == -1) ? dk : g.concat_cols(dks, dk);
        }
        NodeId w = g.softmin_weights(dks);  // [B,K]
        NodeId proj = -1;
        for (int k = 0; k < cfg.k; ++k) {
            NodeId wk = g.expand(g.slice_cols(w, k, k + 1), batch, n);
            NodeId term = g.mul(wk, protos[static_cast<std::size_t>(k)]);
            proj = (proj == -1) ? term : g.add(proj, term);
        }
        dist = g.row_sum(g.square(g.sub(proj, e0y)));
    } else {
        dist = g.row_sum(g.square(g.sub(hx[0], hy[0])));
    }

    NodeId c = g.param("c", 1, 1);
    NodeId prob = g.sigmoid(g.sub(g.expand(c, batch, 1), dist));
    NodeId probc = g.clamp(prob, kProbFloor, kProbCeil);

    NodeId sum_pos_logp = g.sum(g.mul(w_pos, g.log(probc)));
    NodeId sum_neg_log1mp = g.sum(g.mul(w_neg, g.log(g.add_const(g.neg(probc), 1.0))));
    NodeId sum_pos_d = g.sum(g.mul(w_pos, dist));

    NodeId l_ce = g.neg(g.add(g.mul(sum_pos_logp, inv_wpos), g.mul(sum_neg_log1mp, inv_wneg)));
    NodeId loss = cfg.lambda_m > 0
                      ? g.add(l_ce, g.scale(g.mul(sum_pos_d, inv_wpos), cfg.lambda_m))
                      : l_ce;

    lg.loss = loss;
    lg.sum_pos_logp = sum_pos_logp;
    lg.sum_neg_log1mp = sum_neg_log1mp;
    lg.sum_pos_d = sum_pos_d;
    lg.prob = probc;
    lg.dist = dist;
    return lg;
}

PairBatch make_batch(const FeatureSet& items, const PairSet& pairs,
                     const std::vector<std::int64_t>& pair_indices) {
    const auto b = static_cast<std::int64_t>(pair_indices.size());
    if (b == 0) throw DataError("batch: empty batch");
    const std::int64_t d = items.dim();

    // id -> row lookup built once per call.
    std::unordered_map<std::int64_t, std::int64_t> row;
    row.reserve(items.ids.size());
    for (std::int64_t i = 0; i < items.size(); ++i) row[items.ids[static_cast<std::size_t>(i)]] = i;

    PairBatch batch;
    batch.x = Tensor::zeros(b, d);
    batch.y = Tensor::zeros(b, d);
    batch.labels.resize(static_cast<std::size_t>(b));
    batch.weights.resize(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        const auto& t = pairs.triples[static_cast<std::size_t>(pair_indices[static_cast<std::size_t>(i)])];
        auto qx = row.find(t.query_id);
        auto qy = row.find(t.candidate_id);
        if (qx == row.end() || qy == row.end())
            throw DataError("batch: pair references unknown item id");
        std::copy(items.x.data() + qx->second * d, items.x.data() + (qx->second + 1) * d,
                  batch.x.data() + i * d);
        std::copy(items.x.data() + qy->second * d, items.x.data() + (qy->second + 1) * d,
                  batch.y.data() + i * d);
        batch.labels[static_cast<std::size_t>(i)] = t.label;
        batch.weights[static_cast<std::size_t>(i)] =
            pairs.weight(pair_indices[static_cast<std::size_t>(i)]);
    }
    return batch;
}

BatchLoss batch_loss(const CompatModel& model, const PairBatch& batch) {
    const auto b = static_cast<std::int64_t>(batch.labels.size());
    if (b == 0) throw DataError("batch_loss: empty batch");

    Tensor w_pos = Tensor::zeros(b, 1), w_neg = Tensor::zeros(b, 1);
    double spos = 0.0, sneg = 0.0;
    BatchLoss out;
    for (std::int64_t i = 0; i < b; ++i) {
        const double w = batch.weights.empty() ? 1.0 : batch.weights[static_cast<std::size_t>(i)];
        if (batch.labels[static_cast<std::size_t>(i)] > 0) {
            w_pos[i] = w;
            spos += w;
            ++out.n_pos;
        } else {
            w_neg[i] = w;
            sneg += w;
            ++out.n_neg;
        }
    }
    out.pos_term_omitted = spos == 0.0;
    out.neg_term_omitted = sneg == 0.0;

    auto lg = build_compat_loss_graph(model.config, b);
    Session s(*lg.g);
    s.bind("x", batch.x);
    s.bind("y", batch.y);
    s.bind("w_pos", w_pos);
    s.bind("w_neg", w_neg);
    Tensor inv_wpos = Tensor::scalar(spos > 0 ? 1.0 / spos : 0.0);
    Tensor inv_wneg = Tensor::scalar(sneg > 0 ? 1.0 / sneg : 0.0);
    s.bind("inv_wpos", inv_wpos);
    s.bind("inv_wneg", inv_wneg);
    for (const auto& [name, t] : model.params) s.bind(name, t);

    out.loss = s.value(lg.loss)[0];
    const double ce_pos = spos > 0 ? -s.value(lg.sum_pos_logp)[0] / spos : 0.0;
    const double ce_neg = sneg > 0 ? -s.value(lg.sum_neg_log1mp)[0] / sneg : 0.0;
    out.l_ce = ce_pos + ce_neg;
    out.l_metric = spos > 0 ? model.config.lambda_m * s.value(lg.sum_pos_d)[0] / spos : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint io

namespace ckpt {

void write_u16(std::ostream& out, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<char*>(b), 2);
}
void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}
void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}
void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < t.numel(); ++i) write_f32(out, static_cast<float>(t[i]));
}
std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (!in) throw DataError("checkpoint: truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("checkpoint: truncated");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}
float read_f32(std::istream& in) {
    std::uint32_t bits = read_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}
std::pair<std::string, Tensor> read_tensor(std::istream& in) {
    const std::uint32_t len = read_u32(in);
    if (len > 4096) throw DataError("checkpoint: implausible tensor name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw DataError("checkpoint: truncated");
    const std::uint32_t rank = read_u32(in);
    if (rank > 4) throw DataError("checkpoint: implausible tensor rank");
    std::vector<std::int64_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(read_u32(in));
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = read_f32(in);
    return {std::move(name), std::move(t)};
}

}  // namespace ckpt

void save_checkpoint(const CompatModel& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write("CFAM", 4);
    ckpt::write_u16(f, 1);
    ckpt::write_u32(f, model.config.mode == CompatMode::Pcd ? 0 : 1);
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.k));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.n));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.input_dim));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.img_h));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.img_w));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.config.trunk.size()));
    for (int w : model.config.trunk) ckpt::write_u32(f, static_cast<std::uint32_t>(w));
    ckpt::write_f32(f, static_cast<float>(model.config.lambda_m));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.epochs_trained));
    ckpt::write_u32(f, static_cast<std::uint32_t>(model.params.size()));
    for (const auto& [name, t] : model.params) ckpt::write_tensor(f, name, t);
    if (!f) throw IoError("failed writing " + path);
}

CompatModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "CFAM") throw DataError("checkpoint: bad magic");
    if (ckpt::read_u16(f) != 1) throw DataError("checkpoint: unsupported version");

    CompatModel m;
    m.config.mode = ckpt::read_u32(f) == 0 ? CompatMode::Pcd : CompatMode::L2;
    m.config.k = static_cast<int>(ckpt::read_u32(f));
    m.config.n = static_cast<int>(ckpt::read_u32(f));
    m.config.input_dim = ckpt::read_u32(f);
    m.config.img_h = ckpt::read_u32(f);
    m.config.img_w = ckpt::read_u32(f);
    const std::uint32_t depth = ckpt::read_u32(f);
    if (depth > 64) throw DataError("checkpoint: implausible trunk depth");
    m.config.trunk.clear();
    for (std::uint32_t i = 0; i < depth; ++i)
        m.config.trunk.push_back(static_cast<int>(ckpt::read_u32(f)));
    m.config.lambda_m = ckpt::read_f32(f);
    m.epochs_trained = static_cast<int>(ckpt::read_u32(f));
    const std::uint32_t np = ckpt::read_u32(f);
    for (std::uint32_t i = 0; i < np; ++i) {
        auto [name, t] = ckpt::read_tensor(f);
        m.params[name] = std::move(t);
    }
    m.config.validate();
    return m;
}

void export_embeddings_csv(const CompatModel& model, const FeatureSet& items,
                           const std::string& path) {
    if (model.config.mode != CompatMode::Pcd)
        throw ConfigError("embedding export requires PCD mode");
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    const int K = model.config.k, N = model.config.n;
    f << "id";
    for (int j = 0; j < N; ++j) f << ",e0_" << j;
    for (int k = 1; k <= K; ++k)
        for (int j = 0; j < N; ++j) f << ",p" << k << "_" << j;
    f << "\n";
    auto heads = model.encode_batch(items.x);
    f.precision(17);
    for (std::int64_t i = 0; i < items.size(); ++i) {
        f << items.ids[static_cast<std::size_t>(i)];
        for (int h = 0; h <= K; ++h)
            for (int j = 0; j < N; ++j) f << "," << heads[static_cast<std::size_t>(h)].at(i, j);
        f << "\n";
    }
    if (!f) throw IoError("failed writing " + path);
}

}  // namespace compatfam
