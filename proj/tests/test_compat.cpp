#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "compatfam/compat.hpp"
#include "compatfam/rng.hpp"

using namespace compatfam;

namespace {

CompatConfig toy_config() {
    CompatConfig cfg;
    cfg.k = 2;
    cfg.n = 3;
    cfg.trunk = {8};
    cfg.input_dim = 6;
    return cfg;
}

Tensor rand_row(Rng& rng, std::int64_t n) {
    Tensor t = Tensor::zeros(1, n);
    for (std::int64_t i = 0; i < n; ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

/// No-trunk model where heads are hand-settable affine maps on a scalar
/// input. Useful for forcing exact distances.
CompatModel bare_model(int k, double c) {
    CompatConfig cfg;
    cfg.k = k;
    cfg.n = 1;
    cfg.trunk = {};
    cfg.input_dim = 1;
    CompatModel m = CompatModel::init(cfg, 0);
    for (int h = 0; h <= k; ++h) {
        m.params["head" + std::to_string(h) + ".W"] = Tensor::scalar(0.0);
        m.params["head" + std::to_string(h) + ".b"] = Tensor::scalar(0.0);
    }
    m.params["head0.W"] = Tensor::scalar(1.0);  // E_0(y) = y
    m.params["c"] = Tensor::scalar(c);
    return m;
}

}  // namespace

TEST_CASE("encode_family: shapes, determinism, shared trunk") {
    auto cfg = toy_config();
    auto model = CompatModel::init(cfg, 5);
    Rng rng(9);
    Tensor x = rand_row(rng, cfg.input_dim);

    auto fe = model.encode_family(x);
    CHECK(fe.e0.rows() == 1);
    CHECK(fe.e0.cols() == 3);
    CHECK(fe.prototypes.rows() == 2);
    CHECK(fe.prototypes.cols() == 3);

    auto fe2 = model.encode_family(x);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(fe.e0[i] == fe2.e0[i]);

    // Perturbing one trunk weight moves the embedding AND every prototype.
    auto perturbed = model;
    perturbed.params["trunk0.W"][0] += 0.25;
    auto fp = perturbed.encode_family(x);
    bool e0_changed = false, all_protos_changed = true;
    for (std::int64_t i = 0; i < 3; ++i) e0_changed |= fp.e0[i] != fe.e0[i];
    for (std::int64_t k = 0; k < 2; ++k) {
        bool changed = false;
        for (std::int64_t j = 0; j < 3; ++j) changed |= fp.prototypes.at(k, j) != fe.prototypes.at(k, j);
        all_protos_changed &= changed;
    }
    CHECK(e0_changed);
    CHECK(all_protos_changed);

    Tensor bad = Tensor::zeros(1, cfg.input_dim + 1);
    CHECK_THROWS_AS(model.encode_batch(bad), ShapeError);
}

TEST_CASE("pcd: K=1 collapses to d_1 exactly") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor p = rand_row(rng, 5);
        Tensor protos({1, 5}, std::vector<double>(p.data(), p.data() + 5));
        Tensor y = rand_row(rng, 5);
        auto r = pcd(protos, y);
        CHECK(r.d == r.d_k[0]);
        CHECK(r.w_k[0] == 1.0);
    }
}

TEST_CASE("pcd: scalar oracles") {
    SUBCASE("distant prototype contributes ~nothing") {
        Tensor protos({2, 1}, {0.0, 10.0});
        auto r = pcd(protos, Tensor::scalar(0.0));
        CHECK(r.d_k[0] == 0.0);
        CHECK(r.d_k[1] == 100.0);
        CHECK(std::abs(r.d) < 1e-30);
    }
    SUBCASE("symmetric straddle undershoots min_k") {
        Tensor protos({2, 1}, {1.0, -1.0});
        auto r = pcd(protos, Tensor::scalar(0.0));
        CHECK(r.w_k[0] == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(r.w_k[1] == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(r.d == 0.0);
        CHECK(r.d < r.d_k[0]);  // convex combination can beat min_k
    }
}

TEST_CASE("pcd invariants over random draws") {
    Rng rng(12);
    for (int trial = 0; trial < 2000; ++trial) {
        const int k = 1 + static_cast<int>(rng.below(5));
        const int n = 1 + static_cast<int>(rng.below(6));
        Tensor protos = Tensor::zeros(k, n);
        for (std::int64_t i = 0; i < protos.numel(); ++i) protos[i] = rng.normal(0, 2);
        Tensor y = Tensor::zeros(1, n);
        for (std::int64_t i = 0; i < n; ++i) y[i] = rng.normal(0, 2);
        auto r = pcd(protos, y);

        double wsum = 0.0, wdk = 0.0, dmin = r.d_k[0];
        for (int i = 0; i < k; ++i) {
            CHECK(r.w_k[static_cast<std::size_t>(i)] >= 0.0);
            CHECK(r.w_k[static_cast<std::size_t>(i)] <= 1.0);
            wsum += r.w_k[static_cast<std::size_t>(i)];
            wdk += r.w_k[static_cast<std::size_t>(i)] * r.d_k[static_cast<std::size_t>(i)];
            dmin = std::min(dmin, r.d_k[static_cast<std::size_t>(i)]);
        }
        CHECK(std::abs(wsum - 1.0) <= 1e-12);
        CHECK(r.d <= wdk + 1e-9);  // Jensen
    }
}

TEST_CASE("pcd separation limit: d approaches min_k when the gap is large") {
    Rng rng(13);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2;
        Tensor protos = Tensor::zeros(2, n);
        Tensor y = Tensor::zeros(1, n);
        // Near prototype at distance^2 ~ U[0,1]; far one at distance^2 > near + 25.
        const double near = rng.uniform(0.0, 1.0);
        protos.at(0, 0) = std::sqrt(near);
        protos.at(1, 0) = std::sqrt(near + 25.0 + rng.uniform(0.0, 5.0));
        auto r = pcd(protos, y);
        const double gap = r.d_k[1] - r.d_k[0];
        REQUIRE(gap > 20.0);
        CHECK(std::abs(r.d - std::min(r.d_k[0], r.d_k[1])) < 1e-6);
    }
}

TEST_CASE("pair_probability") {
    CHECK(pair_probability(2.0, 2.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(pair_probability(1e10, 1.0) == 0.0);
    CHECK(pair_probability(3.0 - std::log(3.0), 3.0) == doctest::Approx(0.75).epsilon(1e-12));
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const double c = rng.uniform(-2, 2);
        const double d1 = rng.uniform(0, 5);
        const double d2 = d1 + rng.uniform(0.01, 5.0);
        CHECK(pair_probability(d1, c) > pair_probability(d2, c));
    }
}

TEST_CASE("pcd asymmetry: d(x,y) != d(y,x) for suitable parameters") {
    auto m = bare_model(1, 1.0);
    m.params["head1.W"] = Tensor::scalar(1.0);
    m.params["head1.b"] = Tensor::scalar(5.0);  // prototype = x + 5

    auto fx = m.encode_family(Tensor::scalar(1.0));
    auto fy = m.encode_family(Tensor::scalar(2.0));
    const double dxy = pcd(fx.prototypes, fy.e0).d;
    const double dyx = pcd(fy.prototypes, fx.e0).d;
    CHECK(dxy == doctest::Approx(16.0));  // (1+5-2)^2
    CHECK(dyx == doctest::Approx(36.0));  // (2+5-1)^2
    CHECK(dxy != dyx);
}

TEST_CASE("batch_loss: constant and hand-computed cases") {
    SUBCASE("all-positive batch at P=0.5 gives ln 2") {
        auto m = bare_model(1, 0.0);
        m.params["head0.W"] = Tensor::scalar(0.0);  // all embeddings 0 -> d=0, P=sigma(0)
        PairBatch b;
        b.x = Tensor::zeros(3, 1);
        b.y = Tensor::zeros(3, 1);
        b.labels = {1, 1, 1};
        auto r = batch_loss(m, b);
        CHECK(r.l_ce == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(r.neg_term_omitted);
        CHECK_FALSE(r.pos_term_omitted);
        CHECK(r.n_pos == 3);
    }
    SUBCASE("mixed batch at P=0.5 gives 2 ln 2 (both side means)") {
        auto m = bare_model(1, 0.0);
        m.params["head0.W"] = Tensor::scalar(0.0);
        PairBatch b;
        b.x = Tensor::zeros(4, 1);
        b.y = Tensor::zeros(4, 1);
        b.labels = {1, -1, 1, -1};
        auto r = batch_loss(m, b);
        CHECK(r.l_ce == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("single positive pair, d=2, c=2, lambda_m=0.5 -> ln 2 + 1") {
        auto m = bare_model(1, 2.0);
        m.config.lambda_m = 0.5;
        m.params["head1.b"] = Tensor::scalar(std::sqrt(2.0));  // prototype at sqrt(2), e0(y)=0
        PairBatch b;
        b.x = Tensor::zeros(1, 1);
        b.y = Tensor::zeros(1, 1);
        b.labels = {1};
        auto r = batch_loss(m, b);
        CHECK(r.loss == doctest::Approx(std::log(2.0) + 1.0).epsilon(1e-12));
        CHECK(r.l_metric == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("confident model drives L_ce to ~0") {
        auto m = bare_model(1, 30.0);
        PairBatch b;
        b.x = Tensor::zeros(2, 1);
        b.y = Tensor({2, 1}, {0.0, 10.0});  // positive at d=0, negative at d=100
        b.labels = {1, -1};
        auto r = batch_loss(m, b);
        CHECK(r.l_ce < 1e-10);
    }
    SUBCASE("empty batch is an error") {
        auto m = bare_model(1, 1.0);
        PairBatch b;
        CHECK_THROWS_AS(batch_loss(m, b), DataError);
    }
}

TEST_CASE("loss graph agrees with the plain encode/pcd/probability route") {
    auto cfg = toy_config();
    cfg.lambda_m = 0.3;
    auto model = CompatModel::init(cfg, 21);
    Rng rng(22);

    const std::int64_t B = 5;
    PairBatch b;
    b.x = Tensor::zeros(B, cfg.input_dim);
    b.y = Tensor::zeros(B, cfg.input_dim);
    for (std::int64_t i = 0; i < b.x.numel(); ++i) {
        b.x[i] = rng.uniform(-1, 1);
        b.y[i] = rng.uniform(-1, 1);
    }
    b.labels = {1, -1, 1, -1, 1};

    auto lg = build_compat_loss_graph(cfg, B);
    Session s(*lg.g);
    s.bind("x", b.x);
    s.bind("y", b.y);
    Tensor w_pos({B, 1}, {1, 0, 1, 0, 1});
    Tensor w_neg({B, 1}, {0, 1, 0, 1, 0});
    Tensor inv_p = Tensor::scalar(1.0 / 3.0), inv_n = Tensor::scalar(1.0 / 2.0);
    s.bind("w_pos", w_pos);
    s.bind("w_neg", w_neg);
    s.bind("inv_wpos", inv_p);
    s.bind("inv_wneg", inv_n);
    for (const auto& [name, t] : model.params) s.bind(name, t);

    const Tensor& d_graph = s.value(lg.dist);
    const Tensor& p_graph = s.value(lg.prob);
    for (std::int64_t i = 0; i < B; ++i) {
        auto fx = model.encode_family(b.x.row_copy(i));
        auto fy = model.encode_family(b.y.row_copy(i));
        const double d_plain = pcd(fx.prototypes, fy.e0).d;
        const double p_plain = pair_probability(d_plain, model.shift_c());
        CHECK(d_graph[i] == doctest::Approx(d_plain).epsilon(1e-12));
        CHECK(p_graph[i] == doctest::Approx(p_plain).epsilon(1e-12));
    }
}

TEST_CASE("batch_loss gradients pass finite differences at a random non-kink point") {
    auto cfg = toy_config();
    cfg.lambda_m = 0.5;
    auto model = CompatModel::init(cfg, 31);
    Rng rng(32);

    const std::int64_t B = 4;
    auto lg = build_compat_loss_graph(cfg, B);
    std::unordered_map<std::string, Tensor> binds;
    Tensor x = Tensor::zeros(B, cfg.input_dim), y = Tensor::zeros(B, cfg.input_dim);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        x[i] = rng.uniform(-1, 1);
        y[i] = rng.uniform(-1, 1);
    }
    binds["x"] = x;
    binds["y"] = y;
    binds["w_pos"] = Tensor({B, 1}, {1, 0, 1, 0});
    binds["w_neg"] = Tensor({B, 1}, {0, 1, 0, 1});
    binds["inv_wpos"] = Tensor::scalar(0.5);
    binds["inv_wneg"] = Tensor::scalar(0.5);
    for (const auto& [name, t] : model.params) binds[name] = t;

    CHECK(finite_diff_check(*lg.g, lg.loss, binds, 1e-5) < 1e-6);
}

TEST_CASE("L2 mode: single head of size (K+1)*N and symmetric distance") {
    CompatConfig cfg;
    cfg.mode = CompatMode::L2;
    cfg.k = 2;
    cfg.n = 3;
    cfg.trunk = {8};
    cfg.input_dim = 6;
    auto model = CompatModel::init(cfg, 41);
    CHECK(cfg.head_count() == 1);
    CHECK(cfg.head_dim() == 9);

    Rng rng(42);
    Tensor x = rand_row(rng, 6), y = rand_row(rng, 6);
    auto hx = model.encode_batch(x);
    auto hy = model.encode_batch(y);
    REQUIRE(hx.size() == 1);
    CHECK(hx[0].cols() == 9);

    // Symmetric by construction: swapping x and y cannot change the distance.
    PairBatch b1, b2;
    b1.x = x; b1.y = y; b1.labels = {1};
    b2.x = y; b2.y = x; b2.labels = {1};
    auto r1 = batch_loss(model, b1);
    auto r2 = batch_loss(model, b2);
    CHECK(r1.loss == doctest::Approx(r2.loss).epsilon(1e-14));
}

TEST_CASE("checkpoint round trip and error cases") {
    auto cfg = toy_config();
    cfg.lambda_m = 0.25;
    cfg.img_h = 2;
    cfg.img_w = 3;
    auto model = CompatModel::init(cfg, 51);
    model.epochs_trained = 7;

    const std::string path =
        (std::filesystem::temp_directory_path() / "compatfam_test_model.ckpt").string();
    save_checkpoint(model, path);
    auto back = load_checkpoint(path);

    CHECK(back.config.k == cfg.k);
    CHECK(back.config.n == cfg.n);
    CHECK(back.config.trunk == cfg.trunk);
    CHECK(back.config.input_dim == cfg.input_dim);
    CHECK(back.config.lambda_m == doctest::Approx(0.25));
    CHECK(back.epochs_trained == 7);
    REQUIRE(back.params.size() == model.params.size());
    for (const auto& [name, t] : model.params) {
        const Tensor& bt = back.params.at(name);
        REQUIRE(bt.numel() == t.numel());
        for (std::int64_t i = 0; i < t.numel(); ++i)
            CHECK(bt[i] == static_cast<double>(static_cast<float>(t[i])));
    }

    // Saving the loaded model again must be byte-identical (f32 is stable).
    const std::string path2 = path + ".2";
    save_checkpoint(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);

    SUBCASE("bad magic") {
        const std::string badp = path + ".bad";
        std::ofstream bf(badp, std::ios::binary);
        bf << "NOPE1234567890";
        bf.close();
        CHECK_THROWS_AS(load_checkpoint(badp), DataError);
    }
}

TEST_CASE("embedding export header and values") {
    CompatConfig cfg;
    cfg.k = 2;
    cfg.n = 2;
    cfg.trunk = {4};
    cfg.input_dim = 4;
    auto model = CompatModel::init(cfg, 61);

    FeatureSet fs;
    fs.x = Tensor({2, 4}, {0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4});
    fs.labels = {0, 1};
    fs.ids = {10, 11};

    const std::string path =
        (std::filesystem::temp_directory_path() / "compatfam_test_embed.csv").string();
    export_embeddings_csv(model, fs, path);

    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "id,e0_0,e0_1,p1_0,p1_1,p2_0,p2_1");
    std::string row;
    std::getline(f, row);
    CHECK(row.substr(0, 3) == "10,");

    // First row values match encode_family exactly (17-digit round trip).
    auto fe = model.encode_family(fs.x.row_copy(0));
    std::stringstream ss(row);
    std::string tok;
    std::getline(ss, tok, ',');
    std::vector<double> vals;
    while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
    REQUIRE(vals.size() == 6);
    CHECK(vals[0] == fe.e0[0]);
    CHECK(vals[1] == fe.e0[1]);
    CHECK(vals[2] == fe.prototypes.at(0, 0));
    CHECK(vals[5] == fe.prototypes.at(1, 1));
}
