#include "compatfam/mrcgan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "compatfam/pgm.hpp"
#include "compatfam/trainer.hpp"

namespace compatfam {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbCeil = 1.0 - 1e-12;
constexpr double kLreluAlpha = 0.2;
}  // namespace

void GanConfig::validate() const {
    if (z_dim < 1) throw ConfigError("gan: z dimension must be >= 1");
    if (k < 1) throw ConfigError("gan: K must be >= 1");
    if (m_enc < 0) throw ConfigError("gan: m_enc must be >= 0");
    if (lambda_gp < 0 || lambda_dra < 0) throw ConfigError("gan: lambdas must be >= 0");
    if (learning_rate <= 0) throw ConfigError("gan: learning rate must be positive");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw ConfigError("gan: betas must be in (0,1)");
    if (batch_size < 2) throw ConfigError("gan: batch size must be >= 2");
}

// ---------------------------------------------------------------------------
// Model init and plain forward graphs

GanModel GanModel::init(const GanConfig& cfg, std::int64_t item_dim, std::int64_t cond_dim,
                        std::uint64_t seed) {
    cfg.validate();
    if (item_dim < 1 || cond_dim < 1) throw ConfigError("gan: item/cond dims must be positive");
    GanModel m;
    m.cfg = cfg;
    m.item_dim = item_dim;
    m.cond_dim = cond_dim;
    Rng rng(seed);

    auto dense = [&](const std::string& name, std::int64_t in, std::int64_t out) {
        Tensor w = Tensor::zeros(in, out);
        const double s = std::sqrt(2.0 / static_cast<double>(in));
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, s);
        m.params[name + ".W"] = std::move(w);
        m.params[name + ".b"] = Tensor::zeros(1, out);
    };

    std::int64_t in = cfg.z_dim + cond_dim;
    for (std::size_t l = 0; l < cfg.g_widths.size(); ++l) {
        dense("g.lin" + std::to_string(l), in, cfg.g_widths[l]);
        in = cfg.g_widths[l];
    }
    dense("g.out", in, item_dim);

    in = item_dim;
    for (std::size_t l = 0; l < cfg.d_widths.size(); ++l) {
        dense("d.lin" + std::to_string(l), in, cfg.d_widths[l]);
        in = cfg.d_widths[l];
    }
    dense("d.real", in, 1);
    dense("d.q0", in, cond_dim);
    return m;
}

namespace {

/// get-or-create a parameter leaf; frozen use sites read through detach so
/// no gradient can reach the parameter from that branch.
NodeId take_param(Graph& g, const std::string& name, std::int64_t r, std::int64_t c, bool live) {
    NodeId p;
    try {
        p = g.leaf(name);
    } catch (const BindError&) {
        p = g.param(name, r, c);
    }
    return live ? p : g.detach(p);
}

NodeId dense_layer(Graph& g, const std::string& name, NodeId in, std::int64_t in_dim,
                   std::int64_t out_dim, bool live) {
    const std::int64_t batch = g.shape_of(in).r;
    NodeId w = take_param(g, name + ".W", in_dim, out_dim, live);
    NodeId b = take_param(g, name + ".b", 1, out_dim, live);
    return g.add(g.matmul(in, w), g.expand(b, batch, out_dim));
}

NodeId append_generator(Graph& g, const GanConfig& cfg, std::int64_t item_dim,
                        std::int64_t cond_dim, NodeId z, NodeId cond, bool live) {
    NodeId h = g.concat_cols(z, cond);
    std::int64_t in = cfg.z_dim + cond_dim;
    for (std::size_t l = 0; l < cfg.g_widths.size(); ++l) {
        h = g.leaky_relu(dense_layer(g, "g.lin" + std::to_string(l), h, in, cfg.g_widths[l], live),
                         kLreluAlpha);
        in = cfg.g_widths[l];
    }
    NodeId out = dense_layer(g, "g.out", h, in, item_dim, live);
    return cfg.out_sigmoid ? g.sigmoid(out) : out;
}

struct DHeads {
    NodeId realness;  // [B,1] sigmoid
    NodeId q0;        // [B,N]
};

DHeads append_discriminator(Graph& g, const GanConfig& cfg, std::int64_t item_dim,
                            std::int64_t cond_dim, NodeId y, bool live) {
    NodeId h = y;
    std::int64_t in = item_dim;
    for (std::size_t l = 0; l < cfg.d_widths.size(); ++l) {
        h = g.leaky_relu(dense_layer(g, "d.lin" + std::to_string(l), h, in, cfg.d_widths[l], live),
                         kLreluAlpha);
        in = cfg.d_widths[l];
    }
    DHeads out;
    out.realness = g.sigmoid(dense_layer(g, "d.real", h, in, 1, live));
    out.q0 = dense_layer(g, "d.q0", h, in, cond_dim, live);
    return out;
}

}  // namespace

Tensor GanModel::generate(const Tensor& z, const Tensor& cond) const {
    if (z.rank() != 2 || z.cols() != cfg.z_dim) throw ShapeError("generate: bad z shape");
    if (cond.rank() != 2 || cond.cols() != cond_dim || cond.rows() != z.rows())
        throw ShapeError("generate: bad condition shape");
    Graph g;
    NodeId zi = g.input("z", z.rows(), cfg.z_dim);
    NodeId ci = g.input("cond", cond.rows(), cond_dim);
    NodeId out = append_generator(g, cfg, item_dim, cond_dim, zi, ci, true);
    Session s(g);
    s.bind("z", z);
    s.bind("cond", cond);
    for (const auto& [name, t] : params)
        if (name.rfind("g.", 0) == 0) s.bind(name, t);
    return s.value(out);
}

GanModel::DOut GanModel::discriminate(const Tensor& y) const {
    if (y.rank() != 2 || y.cols() != item_dim) throw ShapeError("discriminate: bad input shape");
    Graph g;
    NodeId yi = g.input("y", y.rows(), item_dim);
    DHeads heads = append_discriminator(g, cfg, item_dim, cond_dim, yi, true);
    Session s(g);
    s.bind("y", y);
    for (const auto& [name, t] : params)
        if (name.rfind("d.", 0) == 0) s.bind(name, t);
    DOut out;
    out.realness = s.value(heads.realness);
    out.q0 = s.value(heads.q0);
    return out;
}

// ---------------------------------------------------------------------------
// DRAGAN perturbation

Tensor dragan_perturb(const Tensor& batch, double lambda_dra, Rng& rng) {
    if (batch.numel() == 0) throw DataError("dragan: empty batch");
    const std::int64_t n = batch.numel();
    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mean += batch[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = batch[i] - mean;
        var += d * d;
    }
    const double stddev = std::sqrt(var / static_cast<double>(n));

    Tensor out = batch;
    const double scale = lambda_dra * stddev;
    if (scale != 0.0)
        for (std::int64_t i = 0; i < n; ++i) out[i] += scale * rng.uniform();
    return out;
}

// ---------------------------------------------------------------------------
// Loss graph

NodeId append_gradient_penalty(Graph& g, NodeId d_out, NodeId yhat, double lambda_gp) {
    const auto s = g.shape_of(d_out);
    if (s.c != 1) throw ShapeError("gradient penalty: d_out must be [B,1]");
    NodeId total = g.sum(d_out);
    NodeId grad = g.gradients(total, {yhat})[0];  // [B, dim]; rows independent
    NodeId rn = g.row_norm(grad);
    NodeId pen = g.square(g.add_const(rn, -1.0));
    return g.scale(g.sum(pen), lambda_gp / static_cast<double>(s.r));
}

GanLossGraph build_gan_loss_graph(const GanConfig& cfg, const CompatConfig& compat_cfg,
                                  std::int64_t batch) {
    cfg.validate();
    compat_cfg.validate();
    if (compat_cfg.mode != CompatMode::Pcd)
        throw ConfigError("gan: compat model must be in PCD mode");
    if (cfg.k != compat_cfg.k)
        throw ConfigError("gan: K mismatch with compat model");
    if (cfg.m_prj < 0) throw ConfigError("gan: m_prj not resolved");

    const std::int64_t d = compat_cfg.input_dim;
    const std::int64_t N = compat_cfg.head_dim();
    const int K = cfg.k;
    const double B = static_cast<double>(batch);

    GanLossGraph lg;
    lg.g = std::make_unique<Graph>();
    lg.batch = batch;
    Graph& g = *lg.g;

    NodeId y_real = g.input("y_real", batch, d);
    NodeId x_qry = g.input("x_qry", batch, d);
    NodeId x_neg = g.input("x_neg", batch, d);
    NodeId y_neg = g.input("y_neg", batch, d);
    NodeId y_hat = g.input("y_hat", batch, d);
    NodeId z_enc = g.input("z_enc", batch, cfg.z_dim);
    std::vector<NodeId> z_prj(static_cast<std::size_t>(K)), z_oprj(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        z_prj[static_cast<std::size_t>(k)] = g.input("z_prj_" + std::to_string(k + 1), batch, cfg.z_dim);
        z_oprj[static_cast<std::size_t>(k)] =
            g.input("z_oprj_" + std::to_string(k + 1), batch, cfg.z_dim);
    }

    // Frozen compatibility encoder: outputs detached, so nothing trained
    // here can push gradients into it.
    auto enc = [&](NodeId x) { return append_compat_encoder(g, compat_cfg, x, "cm.", true); };
    auto heads_yreal = enc(y_real);
    auto heads_xqry = enc(x_qry);
    auto heads_xneg = enc(x_neg);
    auto heads_yneg = enc(y_neg);
    NodeId e0_y = heads_yreal[0];
    NodeId e0_yneg = heads_yneg[0];

    auto mean_rows = [&](NodeId col) { return g.scale(g.sum(col), 1.0 / B); };
    auto log_clamped = [&](NodeId p) { return g.log(g.clamp(p, kProbFloor, kProbCeil)); };
    auto log1m_clamped = [&](NodeId p) {
        return g.log(g.clamp(g.add_const(g.neg(p), 1.0), kProbFloor, kProbCeil));
    };

    // Generated samples (live generator).
    NodeId y_enc = append_generator(g, cfg, d, N, z_enc, e0_y, true);
    std::vector<NodeId> y_prj(static_cast<std::size_t>(K)), y_oprj(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        y_prj[static_cast<std::size_t>(k)] = append_generator(
            g, cfg, d, N, z_prj[static_cast<std::size_t>(k)], heads_xqry[static_cast<std::size_t>(k + 1)], true);
        y_oprj[static_cast<std::size_t>(k)] = append_generator(
            g, cfg, d, N, z_oprj[static_cast<std::size_t>(k)], heads_xneg[static_cast<std::size_t>(k + 1)], true);
    }

    auto d_live = [&](NodeId y) { return append_discriminator(g, cfg, d, N, y, true); };
    auto d_frozen = [&](NodeId y) { return append_discriminator(g, cfg, d, N, y, false); };

    // --- Discriminator side: live D params, generator samples detached.
    DHeads real_heads = d_live(y_real);
    NodeId l_real = g.neg(mean_rows(log_clamped(real_heads.realness)));

    NodeId l_enc_d = g.neg(mean_rows(log1m_clamped(d_live(g.detach(y_enc)).realness)));
    NodeId l_prj_d = -1;
    for (int k = 0; k < K; ++k) {
        NodeId term =
            g.neg(mean_rows(log1m_clamped(d_live(g.detach(y_prj[static_cast<std::size_t>(k)])).realness)));
        l_prj_d = (l_prj_d == -1) ? term : g.add(l_prj_d, term);
    }
    l_prj_d = g.scale(l_prj_d, 1.0 / static_cast<double>(K));

    NodeId l_gp = append_gradient_penalty(g, d_live(y_hat).realness, y_hat, cfg.lambda_gp);
    NodeId omega_c = mean_rows(g.row_sum(g.square(g.sub(e0_y, real_heads.q0))));

    NodeId l_d = g.add(g.add(l_real, g.scale(g.add(l_enc_d, l_prj_d), 0.5)), g.add(l_gp, omega_c));

    // --- Generator side: frozen D params, live generator samples.
    DHeads enc_heads_g = d_frozen(y_enc);
    NodeId l_enc_g = g.neg(mean_rows(log1m_clamped(enc_heads_g.realness)));
    NodeId l_prj_g = -1;
    for (int k = 0; k < K; ++k) {
        NodeId term =
            g.neg(mean_rows(log1m_clamped(d_frozen(y_prj[static_cast<std::size_t>(k)]).realness)));
        l_prj_g = (l_prj_g == -1) ? term : g.add(l_prj_g, term);
    }
    l_prj_g = g.scale(l_prj_g, 1.0 / static_cast<double>(K));

    // M+(v,s): squared hinge above m_enc on ||v - Q0(G(z,s))||.
    NodeId enc_dist = g.row_norm(g.sub(e0_y, enc_heads_g.q0));
    NodeId omega_enc = mean_rows(g.square(g.max_const(g.add_const(enc_dist, -cfg.m_enc), 0.0)));

    // M-(v,s): squared hinge below m_prj, over K and the negative pairs.
    NodeId omega_prj = -1;
    for (int k = 0; k < K; ++k) {
        NodeId q = d_frozen(y_oprj[static_cast<std::size_t>(k)]).q0;
        NodeId dist = g.row_norm(g.sub(e0_yneg, q));
        NodeId hinge = g.max_const(g.add_const(g.neg(dist), cfg.m_prj), 0.0);
        NodeId term = g.sum(g.square(hinge));
        omega_prj = (omega_prj == -1) ? term : g.add(omega_prj, term);
    }
    omega_prj = g.scale(omega_prj, 1.0 / (static_cast<double>(K) * B));

    NodeId l_g = g.add(g.scale(g.add(l_enc_g, l_prj_g), -0.5), g.add(omega_enc, omega_prj));

    // Bookkeeping + gradient nodes.
    lg.l_d = l_d;
    lg.l_g = l_g;
    lg.l_real = l_real;
    lg.l_enc = l_enc_d;
    lg.l_prj = l_prj_d;
    lg.l_gp = l_gp;
    lg.omega_c = omega_c;
    lg.omega_enc = omega_enc;
    lg.omega_prj = omega_prj;
    for (const auto& name : g.param_names()) {
        if (name.rfind("d.", 0) == 0) lg.d_params.push_back(name);
        else if (name.rfind("g.", 0) == 0) lg.g_params.push_back(name);
        else lg.cm_params.push_back(name);
    }
    std::vector<NodeId> wrt_d, wrt_g;
    for (const auto& n : lg.d_params) wrt_d.push_back(g.leaf(n));
    for (const auto& n : lg.g_params) wrt_g.push_back(g.leaf(n));
    lg.d_grads = g.gradients(l_d, wrt_d);
    lg.g_grads = g.gradients(l_g, wrt_g);
    return lg;
}

// ---------------------------------------------------------------------------
// Loss evaluation / training

namespace {

Tensor normal_tensor(Rng& rng, std::int64_t r, std::int64_t c) {
    Tensor t = Tensor::zeros(r, c);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

struct GanBindings {
    Tensor y_real, x_qry, x_neg, y_neg, y_hat, z_enc;
    std::vector<Tensor> z_prj, z_oprj;
};

void bind_all(Session& s, const GanBindings& b, const GanModel& gan, const CompatModel& compat) {
    s.bind("y_real", b.y_real);
    s.bind("x_qry", b.x_qry);
    s.bind("x_neg", b.x_neg);
    s.bind("y_neg", b.y_neg);
    s.bind("y_hat", b.y_hat);
    s.bind("z_enc", b.z_enc);
    for (std::size_t k = 0; k < b.z_prj.size(); ++k) {
        s.bind("z_prj_" + std::to_string(k + 1), b.z_prj[k]);
        s.bind("z_oprj_" + std::to_string(k + 1), b.z_oprj[k]);
    }
    for (const auto& [name, t] : gan.params) s.bind(name, t);
    for (const auto& [name, t] : compat.params)
        if (name != "c") s.bind("cm." + name, t);
}

void fresh_noise(GanBindings& b, Rng& rng, std::int64_t batch, int z_dim, int K) {
    b.z_enc = normal_tensor(rng, batch, z_dim);
    b.z_prj.clear();
    b.z_oprj.clear();
    for (int k = 0; k < K; ++k) b.z_prj.push_back(normal_tensor(rng, batch, z_dim));
    for (int k = 0; k < K; ++k) b.z_oprj.push_back(normal_tensor(rng, batch, z_dim));
}

GanTerms read_terms(Session& s, const GanLossGraph& lg) {
    GanTerms t;
    t.l_real = s.value(lg.l_real)[0];
    t.l_enc = s.value(lg.l_enc)[0];
    t.l_prj = s.value(lg.l_prj)[0];
    t.l_gp = s.value(lg.l_gp)[0];
    t.omega_c = s.value(lg.omega_c)[0];
    t.omega_enc = s.value(lg.omega_enc)[0];
    t.omega_prj = s.value(lg.omega_prj)[0];
    t.l_d = s.value(lg.l_d)[0];
    t.l_g = s.value(lg.l_g)[0];
    return t;
}

}  // namespace

GanTerms gan_losses(const GanModel& gan, const CompatModel& compat, const Tensor& y_real,
                    const Tensor& x_query, const Tensor& x_neg, const Tensor& y_neg, Rng& rng) {
    const std::int64_t batch = y_real.rows();
    auto lg = build_gan_loss_graph(gan.cfg, compat.config, batch);
    GanBindings b;
    b.y_real = y_real;
    b.x_qry = x_query;
    b.x_neg = x_neg;
    b.y_neg = y_neg;
    b.y_hat = dragan_perturb(y_real, gan.cfg.lambda_dra, rng);
    fresh_noise(b, rng, batch, gan.cfg.z_dim, gan.cfg.k);
    Session s(*lg.g);
    bind_all(s, b, gan, compat);
    return read_terms(s, lg);
}

double mean_positive_pair_distance(const CompatModel& model, const FeatureSet& items,
                                   const PairSet& pairs) {
    auto heads = model.encode_batch(items.x);
    const int K = model.config.k, N = model.config.n;
    double sum = 0.0;
    std::int64_t count = 0;
    Tensor protos = Tensor::zeros(K, N);
    for (const auto& t : pairs.triples) {
        if (t.label <= 0) continue;
        const auto qi = items.index_of(t.query_id);
        const auto ci = items.index_of(t.candidate_id);
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < N; ++j)
                protos.at(k, j) = heads[static_cast<std::size_t>(k + 1)].at(qi, j);
        sum += std::sqrt(pcd(protos, heads[0].row_copy(ci)).d);
        ++count;
    }
    if (count == 0) throw DataError("no positive pairs for distance estimate");
    return sum / static_cast<double>(count);
}

std::vector<GanCurvePoint> train_mrcgan(GanModel& gan, const CompatModel& compat,
                                        const FeatureSet& items, const PairSet& pairs,
                                        const GanTrainOptions& opts) {
    if (compat.config.lambda_m <= 0)
        throw ConfigError("gan training requires a compat model trained with lambda_m > 0");
    if (gan.cond_dim != compat.config.n)
        throw ConfigError("gan/compat latent size mismatch");
    if (gan.item_dim != items.dim()) throw ConfigError("gan/item dimension mismatch");

    if (gan.cfg.m_prj < 0)
        gan.cfg.m_prj = 1.2 * mean_positive_pair_distance(compat, items, pairs);

    std::vector<std::int64_t> neg_idx;
    for (std::size_t i = 0; i < pairs.triples.size(); ++i)
        if (pairs.triples[i].label < 0) neg_idx.push_back(static_cast<std::int64_t>(i));
    if (neg_idx.empty()) throw DataError("gan training needs negative pairs");

    const std::int64_t B = gan.cfg.batch_size;
    const int K = gan.cfg.k;
    auto lg = build_gan_loss_graph(gan.cfg, compat.config, B);
    Graph& g = *lg.g;

    TrainConfig adam_cfg;
    adam_cfg.learning_rate = gan.cfg.learning_rate;
    adam_cfg.beta1 = gan.cfg.beta1;
    adam_cfg.beta2 = gan.cfg.beta2;
    AdamState adam_d, adam_g;

    Rng rng(opts.seed);
    const std::int64_t n = items.size();
    const std::int64_t d = items.dim();

    auto gather_rows = [&](const std::vector<std::int64_t>& rows) {
        Tensor t = Tensor::zeros(static_cast<std::int64_t>(rows.size()), d);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(items.x.data() + rows[i] * d, items.x.data() + (rows[i] + 1) * d,
                      t.data() + static_cast<std::int64_t>(i) * d);
        return t;
    };

    std::vector<GanCurvePoint> curves;
    Session s(g);
    for (int step = 1; step <= opts.steps; ++step) {
        GanBindings b;
        std::vector<std::int64_t> ry(static_cast<std::size_t>(B)), rx(static_cast<std::size_t>(B));
        std::vector<std::int64_t> rnx(static_cast<std::size_t>(B)), rny(static_cast<std::size_t>(B));
        for (std::int64_t i = 0; i < B; ++i) {
            ry[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
            rx[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
            const auto& t = pairs.triples[static_cast<std::size_t>(
                neg_idx[static_cast<std::size_t>(rng.below(neg_idx.size()))])];
            rnx[static_cast<std::size_t>(i)] = items.index_of(t.query_id);
            rny[static_cast<std::size_t>(i)] = items.index_of(t.candidate_id);
        }
        b.y_real = gather_rows(ry);
        b.x_qry = gather_rows(rx);
        b.x_neg = gather_rows(rnx);
        b.y_neg = gather_rows(rny);
        b.y_hat = dragan_perturb(b.y_real, gan.cfg.lambda_dra, rng);
        fresh_noise(b, rng, B, gan.cfg.z_dim, K);

        // Discriminator step.
        s.reset();
        bind_all(s, b, gan, compat);
        GanTerms d_terms = read_terms(s, lg);
        {
            std::map<std::string, Tensor> grads;
            for (std::size_t i = 0; i < lg.d_params.size(); ++i)
                grads[lg.d_params[i]] = s.value(lg.d_grads[i]);
            std::map<std::string, Tensor> dp;
            for (const auto& name : lg.d_params) dp[name] = gan.params.at(name);
            adam_step(adam_d, dp, grads, adam_cfg);
            for (auto& [name, t] : dp) gan.params[name] = std::move(t);
        }

        // Generator step with fresh noise against the updated discriminator.
        fresh_noise(b, rng, B, gan.cfg.z_dim, K);
        s.reset();
        bind_all(s, b, gan, compat);
        GanTerms g_terms = read_terms(s, lg);
        {
            std::map<std::string, Tensor> grads;
            for (std::size_t i = 0; i < lg.g_params.size(); ++i)
                grads[lg.g_params[i]] = s.value(lg.g_grads[i]);
            std::map<std::string, Tensor> gp;
            for (const auto& name : lg.g_params) gp[name] = gan.params.at(name);
            adam_step(adam_g, gp, grads, adam_cfg);
            for (auto& [name, t] : gp) gan.params[name] = std::move(t);
        }

        if (step == 1 || step % opts.curve_every == 0 || step == opts.steps) {
            GanCurvePoint pt;
            pt.step = step;
            pt.terms = d_terms;
            pt.terms.l_g = g_terms.l_g;
            pt.terms.omega_enc = g_terms.omega_enc;
            pt.terms.omega_prj = g_terms.omega_prj;
            curves.push_back(pt);
        }
        if (!opts.sample_dir.empty() && gan.img_h > 0 &&
            (step % opts.sample_every == 0 || step == opts.steps)) {
            Rng srng = rng.fork(static_cast<std::uint64_t>(step));
            Tensor z = normal_tensor(srng, 16, gan.cfg.z_dim);
            std::vector<std::int64_t> rows(16);
            for (auto& r : rows) r = static_cast<std::int64_t>(srng.below(static_cast<std::uint64_t>(n)));
            Tensor conds = Tensor::zeros(16, gan.cond_dim);
            auto heads = compat.encode_batch(gather_rows(rows));
            for (int i = 0; i < 16; ++i)
                for (std::int64_t j = 0; j < gan.cond_dim; ++j)
                    conds.at(i, j) = heads[1].at(i, j);
            Tensor samples = gan.generate(z, conds);
            write_pgm_grid(samples, gan.img_h, gan.img_w, 4,
                           opts.sample_dir + "/samples-" + std::to_string(step) + ".pgm");
        }
    }

    if (!opts.curves_csv.empty()) save_curves_csv(curves, opts.curves_csv);
    return curves;
}

Tensor sample_compatible(const GanModel& gan, const CompatModel& compat, const FeatureSet& items,
                         std::int64_t query_id, int k, int count, Rng& rng) {
    if (k < 1 || k > compat.config.k) throw ConfigError("sample: prototype index out of range");
    if (count < 1) throw ConfigError("sample: count must be >= 1");
    auto fe = compat.encode_family(items.x.row_copy(items.index_of(query_id)));
    Tensor cond = Tensor::zeros(count, gan.cond_dim);
    for (int i = 0; i < count; ++i)
        for (std::int64_t j = 0; j < gan.cond_dim; ++j) cond.at(i, j) = fe.prototypes.at(k - 1, j);
    Tensor z = normal_tensor(rng, count, gan.cfg.z_dim);
    return gan.generate(z, cond);
}

Tensor sample_style(const GanModel& gan, const CompatModel& compat, const FeatureSet& items,
                    std::int64_t query_id, int count, Rng& rng) {
    if (count < 1) throw ConfigError("sample: count must be >= 1");
    auto fe = compat.encode_family(items.x.row_copy(items.index_of(query_id)));
    Tensor cond = Tensor::zeros(count, gan.cond_dim);
    for (int i = 0; i < count; ++i)
        for (std::int64_t j = 0; j < gan.cond_dim; ++j) cond.at(i, j) = fe.e0.at(0, j);
    Tensor z = normal_tensor(rng, count, gan.cfg.z_dim);
    return gan.generate(z, cond);
}

// ---------------------------------------------------------------------------
// Checkpoint + curves

void save_gan_checkpoint(const GanModel& gan, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write("CGAN", 4);
    ckpt::write_u16(f, 1);
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cfg.z_dim));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cfg.k));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.item_dim));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cond_dim));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.img_h));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.img_w));
    ckpt::write_u32(f, gan.cfg.out_sigmoid ? 1 : 0);
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cfg.g_widths.size()));
    for (int w : gan.cfg.g_widths) ckpt::write_u32(f, static_cast<std::uint32_t>(w));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cfg.d_widths.size()));
    for (int w : gan.cfg.d_widths) ckpt::write_u32(f, static_cast<std::uint32_t>(w));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.lambda_gp));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.lambda_dra));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.m_enc));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.m_prj));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.learning_rate));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.beta1));
    ckpt::write_f32(f, static_cast<float>(gan.cfg.beta2));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.cfg.batch_size));
    ckpt::write_u32(f, static_cast<std::uint32_t>(gan.params.size()));
    for (const auto& [name, t] : gan.params) ckpt::write_tensor(f, name, t);
    if (!f) throw IoError("failed writing " + path);
}

GanModel load_gan_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "CGAN") throw DataError("gan checkpoint: bad magic");
    if (ckpt::read_u16(f) != 1) throw DataError("gan checkpoint: unsupported version");
    GanModel m;
    m.cfg.z_dim = static_cast<int>(ckpt::read_u32(f));
    m.cfg.k = static_cast<int>(ckpt::read_u32(f));
    m.item_dim = ckpt::read_u32(f);
    m.cond_dim = ckpt::read_u32(f);
    m.img_h = ckpt::read_u32(f);
    m.img_w = ckpt::read_u32(f);
    m.cfg.out_sigmoid = ckpt::read_u32(f) != 0;
    const std::uint32_t gw = ckpt::read_u32(f);
    if (gw > 64) throw DataError("gan checkpoint: implausible generator depth");
    m.cfg.g_widths.clear();
    for (std::uint32_t i = 0; i < gw; ++i) m.cfg.g_widths.push_back(static_cast<int>(ckpt::read_u32(f)));
    const std::uint32_t dw = ckpt::read_u32(f);
    if (dw > 64) throw DataError("gan checkpoint: implausible discriminator depth");
    m.cfg.d_widths.clear();
    for (std::uint32_t i = 0; i < dw; ++i) m.cfg.d_widths.push_back(static_cast<int>(ckpt::read_u32(f)));
    m.cfg.lambda_gp = ckpt::read_f32(f);
    m.cfg.lambda_dra = ckpt::read_f32(f);
    m.cfg.m_enc = ckpt::read_f32(f);
    m.cfg.m_prj = ckpt::read_f32(f);
    m.cfg.learning_rate = ckpt::read_f32(f);
    m.cfg.beta1 = ckpt::read_f32(f);
    m.cfg.beta2 = ckpt::read_f32(f);
    m.cfg.batch_size = static_cast<int>(ckpt::read_u32(f));
    const std::uint32_t np = ckpt::read_u32(f);
    for (std::uint32_t i = 0; i < np; ++i) {
        auto [name, t] = ckpt::read_tensor(f);
        m.params[name] = std::move(t);
    }
    m.cfg.validate();
    return m;
}

void save_curves_csv(const std::vector<GanCurvePoint>& curves, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "step,L_D,L_G,omega_c,omega_enc,omega_prj,L_gp\n";
    for (const auto& c : curves)
        f << c.step << "," << c.terms.l_d << "," << c.terms.l_g << "," << c.terms.omega_c << ","
          << c.terms.omega_enc << "," << c.terms.omega_prj << "," << c.terms.l_gp << "\n";
    if (!f) throw IoError("failed writing " + path);
}

}  // namespace compatfam
