#include "compatfam/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "compatfam/eval.hpp"

namespace compatfam {

void TrainConfig::validate() const {
    if (learning_rate <= 0 || epsilon <= 0) throw ConfigError("train: rates must be positive");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw ConfigError("train: betas must be in (0,1)");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
}

void adam_step(AdamState& state, std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, const TrainConfig& cfg) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ConfigError("adam: missing gradient for " + name);
        const Tensor& g = git->second;
        if (!g.same_shape(p)) throw ShapeError("adam: gradient shape mismatch for " + name);
        if (!g.all_finite())
            throw NonFiniteError("adam: non-finite gradient for " + name, -1);
        Tensor& m = state.m.try_emplace(name, Tensor(p.shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(p.shape())).first->second;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Loss runner: graph cache keyed by batch size, persistent sessions.

namespace {

struct LossRunner {
    const CompatConfig& cfg;
    std::map<std::int64_t, CompatLossGraph> graphs;
    std::map<std::int64_t, std::vector<NodeId>> grad_ids;  // aligned with param order
    std::vector<std::string> param_order;

    explicit LossRunner(const CompatConfig& c) : cfg(c) {}

    CompatLossGraph& graph_for(std::int64_t b, bool with_grads) {
        auto it = graphs.find(b);
        if (it == graphs.end()) {
            it = graphs.emplace(b, build_compat_loss_graph(cfg, b)).first;
            if (param_order.empty()) param_order = it->second.g->param_names();
        }
        if (with_grads && !grad_ids.count(b)) {
            Graph& g = *it->second.g;
            std::vector<NodeId> wrt;
            for (const auto& name : g.param_names()) wrt.push_back(g.leaf(name));
            grad_ids[b] = g.gradients(it->second.loss, wrt);
        }
        return it->second;
    }
};

struct BoundBatch {
    Tensor w_pos, w_neg, inv_wpos, inv_wneg;
    double sum_wpos = 0.0, sum_wneg = 0.0;
};

BoundBatch side_weights(const PairBatch& batch) {
    const auto b = static_cast<std::int64_t>(batch.labels.size());
    BoundBatch out;
    out.w_pos = Tensor::zeros(b, 1);
    out.w_neg = Tensor::zeros(b, 1);
    for (std::int64_t i = 0; i < b; ++i) {
        const double w = batch.weights.empty() ? 1.0 : batch.weights[static_cast<std::size_t>(i)];
        if (batch.labels[static_cast<std::size_t>(i)] > 0) {
            out.w_pos[i] = w;
            out.sum_wpos += w;
        } else {
            out.w_neg[i] = w;
            out.sum_wneg += w;
        }
    }
    out.inv_wpos = Tensor::scalar(out.sum_wpos > 0 ? 1.0 / out.sum_wpos : 0.0);
    out.inv_wneg = Tensor::scalar(out.sum_wneg > 0 ? 1.0 / out.sum_wneg : 0.0);
    return out;
}

void bind_batch(Session& s, const CompatModel& model, const PairBatch& batch,
                const BoundBatch& bb) {
    s.bind("x", batch.x);
    s.bind("y", batch.y);
    s.bind("w_pos", bb.w_pos);
    s.bind("w_neg", bb.w_neg);
    s.bind("inv_wpos", bb.inv_wpos);
    s.bind("inv_wneg", bb.inv_wneg);
    for (const auto& [name, t] : model.params) s.bind(name, t);
}

}  // namespace

EvalStats evaluate_pairs(const CompatModel& model, const FeatureSet& items, const PairSet& pairs,
                         int batch_size) {
    if (pairs.size() == 0) throw DataError("evaluate: empty pair set");
    LossRunner runner(model.config);

    double sum_pos_logp = 0.0, sum_neg_log1mp = 0.0, sum_pos_d = 0.0;
    double sum_wpos = 0.0, sum_wneg = 0.0;
    std::vector<double> probs;
    std::vector<int> labels;
    probs.reserve(static_cast<std::size_t>(pairs.size()));

    for (std::int64_t start = 0; start < pairs.size(); start += batch_size) {
        const auto stop = std::min<std::int64_t>(start + batch_size, pairs.size());
        std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), start);
        PairBatch batch = make_batch(items, pairs, idx);
        auto bb = side_weights(batch);
        auto& lg = runner.graph_for(stop - start, false);
        Session s(*lg.g);
        bind_batch(s, model, batch, bb);
        sum_pos_logp += s.value(lg.sum_pos_logp)[0];
        sum_neg_log1mp += s.value(lg.sum_neg_log1mp)[0];
        sum_pos_d += s.value(lg.sum_pos_d)[0];
        sum_wpos += bb.sum_wpos;
        sum_wneg += bb.sum_wneg;
        const Tensor& p = s.value(lg.prob);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            probs.push_back(p[i]);
            labels.push_back(batch.labels[static_cast<std::size_t>(i)]);
        }
    }

    EvalStats out;
    const double ce_pos = sum_wpos > 0 ? -sum_pos_logp / sum_wpos : 0.0;
    const double ce_neg = sum_wneg > 0 ? -sum_neg_log1mp / sum_wneg : 0.0;
    out.l_ce = ce_pos + ce_neg;
    out.loss = out.l_ce +
               (sum_wpos > 0 ? model.config.lambda_m * sum_pos_d / sum_wpos : 0.0);
    out.auc = auc(probs, labels);
    out.error_rate = error_rate(probs, labels);
    return out;
}

TrainResult train_compat(const CompatModel& init, const FeatureSet& train_items,
                         const PairSet& train_pairs, const FeatureSet& val_items,
                         const PairSet& val_pairs, const TrainConfig& cfg) {
    cfg.validate();
    if (train_pairs.size() == 0 || val_pairs.size() == 0)
        throw DataError("train: empty train or val pairs");
    {
        std::unordered_set<std::int64_t> train_ids(train_items.ids.begin(), train_items.ids.end());
        for (auto id : val_items.ids)
            if (train_ids.count(id)) throw DataError("train: item id overlap between splits");
    }

    TrainResult res;
    res.best = init;
    res.last = init;
    if (cfg.epochs == 0) return res;

    CompatModel model = init;
    AdamState adam;
    LossRunner runner(model.config);
    Rng rng(cfg.seed);

    std::vector<std::int64_t> order(static_cast<std::size_t>(train_pairs.size()));
    std::iota(order.begin(), order.end(), 0);

    double best_val = std::numeric_limits<double>::infinity();
    try {
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            rng.shuffle(order);
            double loss_sum = 0.0;
            std::int64_t seen = 0;
            for (std::int64_t start = 0; start < train_pairs.size(); start += cfg.batch_size) {
                const auto stop =
                    std::min<std::int64_t>(start + cfg.batch_size, train_pairs.size());
                std::vector<std::int64_t> idx(order.begin() + start, order.begin() + stop);
                PairBatch batch = make_batch(train_items, train_pairs, idx);
                auto bb = side_weights(batch);
                auto& lg = runner.graph_for(stop - start, true);
                Session s(*lg.g);
                bind_batch(s, model, batch, bb);
                const double loss = s.value(lg.loss)[0];
                loss_sum += loss * static_cast<double>(stop - start);
                seen += stop - start;

                std::map<std::string, Tensor> grads;
                const auto& gids = runner.grad_ids.at(stop - start);
                const auto& names = lg.g->param_names();
                for (std::size_t i = 0; i < names.size(); ++i)
                    grads[names[i]] = s.value(gids[i]);
                adam_step(adam, model.params, grads, cfg);
            }

            EvalStats val = evaluate_pairs(model, val_items, val_pairs, cfg.batch_size);
            if (!std::isfinite(val.loss)) {
                res.diverged = true;
                break;
            }
            EpochStats st;
            st.epoch = init.epochs_trained + epoch;
            st.train_loss = loss_sum / static_cast<double>(seen);
            st.val_loss = val.loss;
            st.val_auc = val.auc;
            res.history.push_back(st);

            model.epochs_trained = init.epochs_trained + epoch;
            res.last = model;
            if (val.loss < best_val) {  // earliest epoch wins ties
                best_val = val.loss;
                res.best = model;
                res.best_epoch = st.epoch;
            }
        }
    } catch (const NonFiniteError&) {
        res.diverged = true;
    }
    return res;
}

// ---------------------------------------------------------------------------
// History CSV

void save_history_csv(const std::vector<EpochStats>& history, const std::string& path,
                      bool append) {
    std::ofstream f(path, append ? std::ios::app : std::ios::out);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    if (!append) f << "epoch,train_loss,val_loss,val_auc\n";
    for (const auto& h : history)
        f << h.epoch << "," << h.train_loss << "," << h.val_loss << "," << h.val_auc << "\n";
    if (!f) throw IoError("failed writing " + path);
}

std::vector<EpochStats> load_history_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "epoch,train_loss,val_loss,val_auc")
        throw DataError("bad history csv header in " + path);
    std::vector<EpochStats> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        EpochStats h;
        char c;
        std::istringstream is(line);
        if (!(is >> h.epoch >> c >> h.train_loss >> c >> h.val_loss >> c >> h.val_auc))
            throw DataError("bad history csv row: " + line);
        out.push_back(h);
    }
    return out;
}

}  // namespace compatfam
