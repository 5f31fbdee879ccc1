#include "compatfam/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "compatfam/compat.hpp"
#include "compatfam/eval.hpp"
#include "compatfam/mrcgan.hpp"
#include "compatfam/pgm.hpp"
#include "compatfam/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace compatfam {

namespace {

// ---------------------------------------------------------------------------
// Config file: a JSON key/value tree mirroring the dataset/compat/train/gan
// option groups. Unknown keys are rejected; command-line flags override.

struct RunConfig {
    // dataset
    int per_class = 200;
    int classes = 10;
    int image_size = 16;
    std::vector<int> shifts = {1, 2};
    int pairs_per_item = 1;
    double pos_fraction = 0.5;
    // compat
    std::string mode = "pcd";
    int k = 2;
    int n = 20;
    std::vector<int> trunk = {64, 64};
    double lambda_m = 0.0;
    // train
    TrainConfig train;
    // gan
    GanConfig gan;
    int gan_steps = 5000;
    int sample_every = 1000;
    // shared
    std::uint64_t seed = 0;
};

void expect_keys(const json& j, const std::string& scope,
                 const std::vector<std::string>& allowed) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("config: unknown key '" + scope + key + "'");
    }
}

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) return rc;
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    expect_keys(j, "", {"seed", "dataset", "compat", "train", "gan"});
    if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        expect_keys(d, "dataset.",
                    {"per_class", "classes", "image_size", "shifts", "pairs_per_item",
                     "pos_fraction"});
        if (d.contains("per_class")) rc.per_class = d["per_class"].get<int>();
        if (d.contains("classes")) rc.classes = d["classes"].get<int>();
        if (d.contains("image_size")) rc.image_size = d["image_size"].get<int>();
        if (d.contains("shifts")) rc.shifts = d["shifts"].get<std::vector<int>>();
        if (d.contains("pairs_per_item")) rc.pairs_per_item = d["pairs_per_item"].get<int>();
        if (d.contains("pos_fraction")) rc.pos_fraction = d["pos_fraction"].get<double>();
    }
    if (j.contains("compat")) {
        const auto& c = j["compat"];
        expect_keys(c, "compat.", {"mode", "k", "n", "trunk", "lambda_m"});
        if (c.contains("mode")) rc.mode = c["mode"].get<std::string>();
        if (c.contains("k")) rc.k = c["k"].get<int>();
        if (c.contains("n")) rc.n = c["n"].get<int>();
        if (c.contains("trunk")) rc.trunk = c["trunk"].get<std::vector<int>>();
        if (c.contains("lambda_m")) rc.lambda_m = c["lambda_m"].get<double>();
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        expect_keys(t, "train.",
                    {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "epochs"});
        if (t.contains("learning_rate")) rc.train.learning_rate = t["learning_rate"].get<double>();
        if (t.contains("beta1")) rc.train.beta1 = t["beta1"].get<double>();
        if (t.contains("beta2")) rc.train.beta2 = t["beta2"].get<double>();
        if (t.contains("epsilon")) rc.train.epsilon = t["epsilon"].get<double>();
        if (t.contains("batch_size")) rc.train.batch_size = t["batch_size"].get<int>();
        if (t.contains("epochs")) rc.train.epochs = t["epochs"].get<int>();
    }
    if (j.contains("gan")) {
        const auto& g = j["gan"];
        expect_keys(g, "gan.",
                    {"z", "lambda_gp", "lambda_dra", "m_enc", "m_prj", "learning_rate", "beta1",
                     "beta2", "batch_size", "steps", "g_widths", "d_widths", "sample_every"});
        if (g.contains("z")) rc.gan.z_dim = g["z"].get<int>();
        if (g.contains("lambda_gp")) rc.gan.lambda_gp = g["lambda_gp"].get<double>();
        if (g.contains("lambda_dra")) rc.gan.lambda_dra = g["lambda_dra"].get<double>();
        if (g.contains("m_enc")) rc.gan.m_enc = g["m_enc"].get<double>();
        if (g.contains("m_prj")) rc.gan.m_prj = g["m_prj"].get<double>();
        if (g.contains("learning_rate")) rc.gan.learning_rate = g["learning_rate"].get<double>();
        if (g.contains("beta1")) rc.gan.beta1 = g["beta1"].get<double>();
        if (g.contains("beta2")) rc.gan.beta2 = g["beta2"].get<double>();
        if (g.contains("batch_size")) rc.gan.batch_size = g["batch_size"].get<int>();
        if (g.contains("steps")) rc.gan_steps = g["steps"].get<int>();
        if (g.contains("g_widths")) rc.gan.g_widths = g["g_widths"].get<std::vector<int>>();
        if (g.contains("d_widths")) rc.gan.d_widths = g["d_widths"].get<std::vector<int>>();
        if (g.contains("sample_every")) rc.sample_every = g["sample_every"].get<int>();
    }
    return rc;
}

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    // Probe writability; create_directories succeeds silently on existing dirs.
    const std::string probe = out + "/.write-probe";
    std::ofstream f(probe);
    if (!f) throw IoError("output directory not writable: " + out);
    f.close();
    fs::remove(probe, ec);
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stoi(tok));
    }
    if (out.empty()) throw UsageError("empty integer list: " + csv);
    return out;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const RunConfig& rc, const std::string& out_dir) {
    ensure_out_dir(out_dir);
    RelationSpec spec;
    spec.num_classes = rc.classes;
    spec.positive_shifts = rc.shifts;
    spec.validate();

    Rng seeds(rc.seed);
    ItemSet items = gen_procedural_items(rc.per_class, spec, rc.image_size, seeds.fork(1).next_u64());
    auto splits = split_items(items, SplitRatios{}, seeds.fork(2).next_u64());
    const char* names[3] = {"train", "val", "test"};

    json meta;
    meta["classes"] = rc.classes;
    meta["shifts"] = rc.shifts;
    meta["image_size"] = rc.image_size;
    meta["per_class"] = rc.per_class;
    meta["pairs_per_item"] = rc.pairs_per_item;
    meta["pos_fraction"] = rc.pos_fraction;
    meta["seed"] = rc.seed;
    {
        std::ofstream mf(out_dir + "/meta.json");
        if (!mf) throw IoError("cannot write meta.json");
        mf << meta.dump(2) << "\n";
    }

    for (int i = 0; i < 3; ++i) {
        const ItemSet& s = splits[static_cast<std::size_t>(i)];
        const std::string base = out_dir + "/" + names[i];
        save_idx(s, base + "-images.idx", base + "-labels.idx");
        save_ids_csv(s.ids, base + "-ids.csv");
        PairSet pairs = build_pairs(s, spec, rc.pairs_per_item,
                                    seeds.fork(10 + static_cast<std::uint64_t>(i)).next_u64(),
                                    rc.pos_fraction);
        pairs.split = names[i];
        save_pairs_csv(pairs, base + "-pairs.csv");
        std::int64_t pos = 0;
        for (const auto& t : pairs.triples) pos += t.label > 0;
        std::cout << names[i] << ": items=" << s.size() << " pairs=" << pairs.size()
                  << " positives=" << pos << "\n";
    }
    return kExitOk;
}

}  // namespace

LoadedSplit load_split(const std::string& data_dir, const std::string& split) {
    const std::string base = data_dir + "/" + split;
    ItemSet items = load_idx(base + "-images.idx", base + "-labels.idx");
    items.ids = load_ids_csv(base + "-ids.csv");
    if (static_cast<std::int64_t>(items.ids.size()) != items.size())
        throw DataError("ids file does not match item count for split " + split);
    LoadedSplit out;
    out.items = flatten(items);
    out.pairs = load_pairs_csv(base + "-pairs.csv");
    out.pairs.split = split;
    return out;
}

namespace {

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& rc, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
    ensure_out_dir(out_dir);
    auto train = load_split(data_dir, "train");
    auto val = load_split(data_dir, "val");

    CompatModel model;
    bool resumed = false;
    if (!resume.empty()) {
        model = load_checkpoint(resume);
        if (model.config.input_dim != train.items.dim())
            throw ConfigError("resume: checkpoint input dim does not match dataset");
        resumed = true;
    } else {
        CompatConfig cc;
        cc.mode = rc.mode == "l2" ? CompatMode::L2 : CompatMode::Pcd;
        if (rc.mode != "l2" && rc.mode != "pcd") throw UsageError("mode must be pcd or l2");
        cc.k = rc.k;
        cc.n = rc.n;
        cc.trunk = rc.trunk;
        cc.lambda_m = rc.lambda_m;
        cc.input_dim = train.items.dim();
        cc.img_h = train.items.img_h;
        cc.img_w = train.items.img_w;
        model = CompatModel::init(cc, Rng(rc.seed).fork(100).next_u64());
    }

    TrainConfig tc = rc.train;
    tc.seed = Rng(rc.seed).fork(101).next_u64();
    TrainResult res = train_compat(model, train.items, train.pairs, val.items, val.pairs, tc);

    save_checkpoint(res.best, out_dir + "/model.best");
    save_checkpoint(res.last, out_dir + "/model.last");
    save_history_csv(res.history, out_dir + "/history.csv",
                     resumed && fs::exists(out_dir + "/history.csv"));

    double best_auc = 0.0;
    for (const auto& h : res.history)
        if (h.epoch == res.best_epoch) best_auc = h.val_auc;
    if (res.diverged) std::cout << "warning: training diverged; last finite checkpoint kept\n";
    std::cout << "best_epoch=" << res.best_epoch << " best_val_auc=" << best_auc << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& data_dir, const std::string& model_path,
             const std::string& out_dir, const std::string& split,
             const std::string& export_embeddings) {
    ensure_out_dir(out_dir);
    CompatModel model = load_checkpoint(model_path);
    auto data = load_split(data_dir, split);
    if (model.config.input_dim != data.items.dim())
        throw ConfigError("eval: checkpoint input dim does not match dataset");

    EvalStats stats = evaluate_pairs(model, data.items, data.pairs);
    save_metrics_csv({{"error_rate", stats.error_rate}, {"auc", stats.auc}, {"loss", stats.loss}},
                     out_dir + "/metrics.csv");
    if (!export_embeddings.empty()) export_embeddings_csv(model, data.items, export_embeddings);
    std::cout << "split=" << split << " auc=" << stats.auc << " error_rate=" << stats.error_rate
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// recommend

int cmd_recommend(const std::string& data_dir, const std::string& model_path,
                  const std::string& out_dir, const std::string& split, std::int64_t query_id,
                  int top_n, bool exact, bool approx, bool compare) {
    ensure_out_dir(out_dir);
    CompatModel model = load_checkpoint(model_path);
    if (model.config.mode != CompatMode::Pcd)
        throw ConfigError("recommend requires a PCD-mode checkpoint");
    auto data = load_split(data_dir, split);
    if (model.config.input_dim != data.items.dim())
        throw ConfigError("recommend: checkpoint input dim does not match dataset");

    CandidateIndex index = build_candidate_index(model, data.items);
    std::vector<std::int64_t> queries;
    if (query_id >= 0) queries.push_back(query_id);
    else queries = data.items.ids;

    std::vector<RankedList> ex, ap;
    for (auto q : queries) {
        if (compare || exact) ex.push_back(recommend_exact(model, data.items, q, index, top_n));
        if (compare || approx) ap.push_back(recommend_approx(model, data.items, q, index, top_n));
    }
    if (compare) {
        std::int64_t agree = 0;
        for (std::size_t i = 0; i < queries.size(); ++i)
            agree += !ex[i].entries.empty() && !ap[i].entries.empty() &&
                     ex[i].entries[0].candidate_id == ap[i].entries[0].candidate_id;
        save_rankings_csv(ex, out_dir + "/rankings-exact.csv");
        save_rankings_csv(ap, out_dir + "/rankings-approx.csv");
        std::cout << "queries=" << queries.size() << " top1_agreement="
                  << static_cast<double>(agree) / static_cast<double>(queries.size()) << "\n";
    } else {
        save_rankings_csv(exact ? ex : ap, out_dir + "/rankings.csv");
        std::cout << "queries=" << queries.size() << " mode=" << (exact ? "exact" : "approx")
                  << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train-gan / sample

int cmd_train_gan(const RunConfig& rc, const std::string& data_dir, const std::string& model_path,
                  const std::string& out_dir, int steps) {
    ensure_out_dir(out_dir);
    CompatModel compat = load_checkpoint(model_path);
    auto data = load_split(data_dir, "train");
    if (compat.config.input_dim != data.items.dim())
        throw ConfigError("train-gan: checkpoint input dim does not match dataset");

    GanConfig gc = rc.gan;
    gc.k = compat.config.k;
    GanModel gan = GanModel::init(gc, data.items.dim(), compat.config.n,
                                  Rng(rc.seed).fork(200).next_u64());
    gan.img_h = data.items.img_h;
    gan.img_w = data.items.img_w;

    GanTrainOptions opts;
    opts.steps = steps;
    opts.seed = Rng(rc.seed).fork(201).next_u64();
    opts.curves_csv = out_dir + "/curves.csv";
    opts.sample_dir = gan.img_h > 0 ? out_dir : "";
    opts.sample_every = rc.sample_every;
    auto curves = train_mrcgan(gan, compat, data.items, data.pairs, opts);

    save_gan_checkpoint(gan, out_dir + "/gan.ckpt");
    if (!curves.empty())
        std::cout << "steps=" << steps << " final_L_D=" << curves.back().terms.l_d
                  << " final_L_G=" << curves.back().terms.l_g << " m_prj=" << gan.cfg.m_prj
                  << "\n";
    return kExitOk;
}

int cmd_sample(const std::string& gan_path, const std::string& model_path,
               const std::string& data_dir, const std::string& out_dir, const std::string& split,
               std::int64_t query_id, int prototype, bool style, int count, std::uint64_t seed) {
    ensure_out_dir(out_dir);
    CompatModel compat = load_checkpoint(model_path);
    GanModel gan = load_gan_checkpoint(gan_path);
    if (gan.cond_dim != compat.config.n || gan.cfg.k != compat.config.k)
        throw ConfigError("sample: GAN and compat checkpoints disagree on K or N");
    auto data = load_split(data_dir, split);
    if (compat.config.input_dim != data.items.dim())
        throw ConfigError("sample: checkpoint input dim does not match dataset");
    if (gan.img_h <= 0) throw ConfigError("sample: GAN was not trained on image data");
    if (query_id < 0) query_id = data.items.ids.at(0);

    Rng rng(seed);
    Tensor samples = style
                         ? sample_style(gan, compat, data.items, query_id, count, rng)
                         : sample_compatible(gan, compat, data.items, query_id, prototype, count, rng);
    for (int i = 0; i < count; ++i) {
        Tensor row = samples.row_copy(i);
        write_pgm(row.data(), gan.img_h, gan.img_w,
                  out_dir + "/sample-" + std::to_string(i) + ".pgm");
    }
    std::cout << "wrote " << count << " samples for query " << query_id
              << (style ? " (style mode)" : " (prototype " + std::to_string(prototype) + ")")
              << "\n";
    return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Compatibility-family learning: dataset synthesis, training, "
                 "evaluation, retrieval, and compatible-item generation"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, model_path, gan_path, resume;
    std::string split = "test";
    std::string mode;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int k = 0, n = 0, z_dim = 0, epochs = -1, steps = -1, top_n = 10, count = 4, prototype = 1;
    double lambda_m = -1.0;
    std::string shifts_csv, trunk_csv;
    int per_class = -1, image_size = -1, classes = -1, pairs_per_item = -1, batch_size = -1;
    double lr = -1.0, m_enc = -1.0, m_prj = std::numeric_limits<double>::quiet_NaN();
    std::int64_t query_id = -1;
    bool use_exact = false, use_approx = false, use_compare = false, style = false;
    std::string export_embeddings;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "JSON config file");
        c->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
            seed_given = true;
        });
        c->add_option("--out", out_dir, "output directory")->required();
    };

    auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
    add_common(gen);
    gen->add_option("--per-class", per_class, "items per class");
    gen->add_option("--classes", classes, "number of classes (<= 10)");
    gen->add_option("--image-size", image_size, "square image side (>= 8)");
    gen->add_option("--shifts", shifts_csv, "positive class shifts, e.g. 1,2");
    gen->add_option("--pairs-per-item", pairs_per_item, "sampled pairs per query item");

    auto* train = app.add_subcommand("train", "train the compatibility model");
    add_common(train);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--mode", mode, "pcd or l2");
    train->add_option("--k", k, "prototype count");
    train->add_option("--n", n, "latent size");
    train->add_option("--lambda-m", lambda_m, "metric regularizer weight");
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--batch-size", batch_size, "mini-batch size");
    train->add_option("--lr", lr, "learning rate");
    train->add_option("--trunk", trunk_csv, "trunk widths, e.g. 64,64");
    train->add_option("--resume", resume, "continue from a .last checkpoint");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval);
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--model", model_path, "checkpoint path")->required();
    eval->add_option("--split", split, "train|val|test");
    eval->add_option("--export-embeddings", export_embeddings, "write embedding CSV here");

    auto* rec = app.add_subcommand("recommend", "rank compatible candidates");
    add_common(rec);
    rec->add_option("--data", data_dir, "dataset directory")->required();
    rec->add_option("--model", model_path, "checkpoint path")->required();
    rec->add_option("--split", split, "candidate/query split");
    rec->add_option("--query", query_id, "query item id (default: all items in split)");
    rec->add_option("--top", top_n, "list length");
    rec->add_flag("--exact", use_exact, "full PCD ranking");
    rec->add_flag("--approx", use_approx, "K-way nearest-neighbor ranking");
    rec->add_flag("--compare", use_compare, "run both and report top-1 agreement");

    auto* tg = app.add_subcommand("train-gan", "train the compatible-item generator");
    add_common(tg);
    tg->add_option("--data", data_dir, "dataset directory")->required();
    tg->add_option("--model", model_path, "compat checkpoint (lambda_m > 0)")->required();
    tg->add_option("--steps", steps, "training iterations");
    tg->add_option("--z", z_dim, "noise dimension");
    tg->add_option("--m-enc", m_enc, "encoder-side hinge margin");
    tg->add_option("--m-prj", m_prj, "projection-side hinge margin");
    tg->add_option("--batch-size", batch_size, "mini-batch size");

    auto* smp = app.add_subcommand("sample", "generate compatible items");
    add_common(smp);
    smp->add_option("--gan", gan_path, "GAN checkpoint")->required();
    smp->add_option("--model", model_path, "compat checkpoint")->required();
    smp->add_option("--data", data_dir, "dataset directory")->required();
    smp->add_option("--split", split, "query split");
    smp->add_option("--query", query_id, "query item id (default: first in split)");
    smp->add_option("--prototype", prototype, "prototype index (1-based)");
    smp->add_flag("--style", style, "condition on E_0 of the query instead");
    smp->add_option("--count", count, "number of samples");

    std::vector<const char*> argv;
    argv.push_back("compatfam");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // --help exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        RunConfig rc = load_run_config(config_path);
        if (seed_given) rc.seed = seed;
        if (per_class > 0) rc.per_class = per_class;
        if (classes > 0) rc.classes = classes;
        if (image_size > 0) rc.image_size = image_size;
        if (!shifts_csv.empty()) rc.shifts = parse_int_list(shifts_csv);
        if (pairs_per_item > 0) rc.pairs_per_item = pairs_per_item;
        if (!mode.empty()) rc.mode = mode;
        if (train->count("--k")) rc.k = k;
        if (train->count("--n")) rc.n = n;
        if (lambda_m >= 0) rc.lambda_m = lambda_m;
        if (epochs >= 0) rc.train.epochs = epochs;
        if (batch_size > 1) {
            rc.train.batch_size = batch_size;
            rc.gan.batch_size = batch_size;
        }
        if (lr > 0) rc.train.learning_rate = lr;
        if (!trunk_csv.empty()) rc.trunk = parse_int_list(trunk_csv);
        if (z_dim > 0) rc.gan.z_dim = z_dim;
        if (m_enc >= 0) rc.gan.m_enc = m_enc;
        if (!std::isnan(m_prj)) rc.gan.m_prj = m_prj;
        if (steps < 0) steps = rc.gan_steps;

        if (gen->parsed()) return cmd_gen_data(rc, out_dir);
        if (train->parsed()) return cmd_train(rc, data_dir, out_dir, resume);
        if (eval->parsed())
            return cmd_eval(data_dir, model_path, out_dir, split, export_embeddings);
        if (rec->parsed()) {
            if (use_exact + use_approx + use_compare != 1)
                throw UsageError("recommend: pass exactly one of --exact/--approx/--compare");
            return cmd_recommend(data_dir, model_path, out_dir, split, query_id, top_n, use_exact,
                                 use_approx, use_compare);
        }
        if (tg->parsed()) return cmd_train_gan(rc, data_dir, model_path, out_dir, steps);
        if (smp->parsed())
            return cmd_sample(gan_path, model_path, data_dir, out_dir, split, query_id, prototype,
                              style, count, rc.seed);
        throw UsageError("no subcommand");
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace compatfam
