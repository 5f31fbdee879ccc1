#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include "compatfam/dataset.hpp"

using namespace compatfam;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("compatfam_test_" + name)).string();
}

}  // namespace

TEST_CASE("gen_procedural_items: counts, range, determinism") {
    RelationSpec spec;
    spec.num_classes = 10;
    auto items = gen_procedural_items(10, spec, 16, 7);
    items.validate(10);
    CHECK(items.size() == 100);

    std::vector<int> per_class(10, 0);
    for (int l : items.labels) per_class[static_cast<std::size_t>(l)]++;
    for (int c : per_class) CHECK(c == 10);
    for (std::int64_t i = 0; i < items.images.numel(); ++i) {
        CHECK(items.images[i] >= 0.0);
        CHECK(items.images[i] <= 1.0);
    }

    auto again = gen_procedural_items(10, spec, 16, 7);
    REQUIRE(again.images.numel() == items.images.numel());
    bool identical = again.labels == items.labels && again.ids == items.ids;
    for (std::int64_t i = 0; i < items.images.numel(); ++i)
        identical = identical && items.images[i] == again.images[i];
    CHECK(identical);

    CHECK_THROWS_AS(gen_procedural_items(10, spec, 4, 7), DataError);
}

TEST_CASE("gen_procedural_items: classes are linearly separable (perceptron oracle)") {
    RelationSpec spec;
    spec.num_classes = 10;
    auto items = gen_procedural_items(50, spec, 16, 11);
    const std::int64_t n = items.size();
    const std::int64_t d = items.height() * items.width();

    // Multiclass perceptron on raw pixels with a bias feature.
    std::vector<std::vector<double>> w(10, std::vector<double>(static_cast<std::size_t>(d) + 1, 0.0));
    auto score = [&](int cls, const double* px) {
        double s = w[static_cast<std::size_t>(cls)][static_cast<std::size_t>(d)];
        for (std::int64_t j = 0; j < d; ++j)
            s += w[static_cast<std::size_t>(cls)][static_cast<std::size_t>(j)] * px[j];
        return s;
    };
    bool separable = false;
    for (int epoch = 0; epoch < 100 && !separable; ++epoch) {
        int errors = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double* px = items.images.data() + i * d;
            int best = 0;
            for (int c = 1; c < 10; ++c)
                if (score(c, px) > score(best, px)) best = c;
            const int truth = items.labels[static_cast<std::size_t>(i)];
            if (best != truth) {
                ++errors;
                for (std::int64_t j = 0; j < d; ++j) {
                    w[static_cast<std::size_t>(truth)][static_cast<std::size_t>(j)] += px[j];
                    w[static_cast<std::size_t>(best)][static_cast<std::size_t>(j)] -= px[j];
                }
                w[static_cast<std::size_t>(truth)][static_cast<std::size_t>(d)] += 1.0;
                w[static_cast<std::size_t>(best)][static_cast<std::size_t>(d)] -= 1.0;
            }
        }
        separable = errors == 0;
    }
    CHECK(separable);  // 100% train accuracy reached
}

TEST_CASE("load_idx: hand-built fixture and error cases") {
    // 4 images of 28x28, pixels = (image index * 60 + pixel) % 256.
    const std::string img_path = tmp_path("fixture-images.idx");
    const std::string lab_path = tmp_path("fixture-labels.idx");
    auto be32 = [](std::ofstream& f, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    {
        std::ofstream fi(img_path, std::ios::binary);
        be32(fi, 0x00000803);
        be32(fi, 4);
        be32(fi, 28);
        be32(fi, 28);
        for (int i = 0; i < 4; ++i)
            for (int p = 0; p < 28 * 28; ++p) {
                unsigned char v = static_cast<unsigned char>((i * 60 + p) % 256);
                fi.write(reinterpret_cast<char*>(&v), 1);
            }
        std::ofstream fl(lab_path, std::ios::binary);
        be32(fl, 0x00000801);
        be32(fl, 4);
        for (unsigned char l : {0, 3, 7, 9}) fl.write(reinterpret_cast<char*>(&l), 1);
    }

    auto items = load_idx(img_path, lab_path);
    CHECK(items.size() == 4);
    CHECK(items.height() == 28);
    CHECK(items.width() == 28);
    CHECK(items.labels == std::vector<int>{0, 3, 7, 9});
    CHECK(items.images[0] == 0.0);
    CHECK(items.images[255] == 1.0);  // pixel 255 of image 0 has byte value 255
    CHECK(items.images.data()[28 * 28] == doctest::Approx(60.0 / 255.0));

    SUBCASE("bad magic") {
        const std::string bad = tmp_path("bad-magic.idx");
        std::ofstream f(bad, std::ios::binary);
        be32(f, 0x00000802);
        be32(f, 4);
        be32(f, 28);
        be32(f, 28);
        f.close();
        CHECK_THROWS_WITH_AS(load_idx(bad, lab_path), doctest::Contains("bad magic"), DataError);
    }
    SUBCASE("count mismatch") {
        const std::string lab2 = tmp_path("mismatch-labels.idx");
        std::ofstream f(lab2, std::ios::binary);
        be32(f, 0x00000801);
        be32(f, 3);
        for (unsigned char l : {0, 1, 2}) f.write(reinterpret_cast<char*>(&l), 1);
        f.close();
        CHECK_THROWS_WITH_AS(load_idx(img_path, lab2), doctest::Contains("count mismatch"),
                             DataError);
    }
    SUBCASE("truncated file") {
        const std::string trunc = tmp_path("trunc-images.idx");
        std::ofstream f(trunc, std::ios::binary);
        be32(f, 0x00000803);
        be32(f, 4);
        be32(f, 28);
        be32(f, 28);
        unsigned char v = 1;
        for (int i = 0; i < 100; ++i) f.write(reinterpret_cast<char*>(&v), 1);
        f.close();
        CHECK_THROWS_AS(load_idx(trunc, lab_path), DataError);
    }
}

TEST_CASE("save_idx/load_idx round trip within quantization") {
    RelationSpec spec;
    spec.num_classes = 4;
    auto items = gen_procedural_items(5, spec, 8, 3);
    const std::string ip = tmp_path("rt-images.idx"), lp = tmp_path("rt-labels.idx");
    save_idx(items, ip, lp);
    auto back = load_idx(ip, lp);
    REQUIRE(back.size() == items.size());
    CHECK(back.labels == items.labels);
    for (std::int64_t i = 0; i < items.images.numel(); ++i)
        CHECK(std::abs(back.images[i] - items.images[i]) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("split_items: sizes, partition, stratification, determinism") {
    RelationSpec spec;
    spec.num_classes = 10;
    auto items = gen_procedural_items(10, spec, 8, 5);
    auto splits = split_items(items, SplitRatios{}, 17);

    CHECK(splits[0].size() == 60);
    CHECK(splits[1].size() == 20);
    CHECK(splits[2].size() == 20);

    std::set<std::int64_t> all;
    std::size_t total = 0;
    for (const auto& s : splits) {
        total += static_cast<std::size_t>(s.size());
        all.insert(s.ids.begin(), s.ids.end());
    }
    CHECK(all.size() == total);  // pairwise disjoint
    CHECK(all == std::set<std::int64_t>(items.ids.begin(), items.ids.end()));

    // Stratification: class histogram proportional within one item.
    for (int b = 0; b < 3; ++b) {
        std::vector<int> hist(10, 0);
        for (int l : splits[static_cast<std::size_t>(b)].labels) hist[static_cast<std::size_t>(l)]++;
        const double expect = b == 0 ? 6.0 : 2.0;
        for (int h : hist) CHECK(std::abs(h - expect) <= 1.0);
    }

    auto again = split_items(items, SplitRatios{}, 17);
    for (int b = 0; b < 3; ++b) CHECK(again[static_cast<std::size_t>(b)].ids == splits[static_cast<std::size_t>(b)].ids);

    // Disjointness holds across seeds.
    for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
        auto sp = split_items(items, SplitRatios{}, seed);
        std::set<std::int64_t> u;
        std::size_t t = 0;
        for (const auto& s : sp) {
            u.insert(s.ids.begin(), s.ids.end());
            t += static_cast<std::size_t>(s.size());
        }
        CHECK(u.size() == t);
    }

    SUBCASE("class with fewer than 3 items is rejected") {
        ItemSet tiny;
        tiny.images = Tensor({2, 8, 8});
        tiny.labels = {0, 0};
        tiny.ids = {0, 1};
        CHECK_THROWS_AS(split_items(tiny, SplitRatios{}, 1), DataError);
    }
    SUBCASE("bad ratios rejected") {
        CHECK_THROWS_AS(split_items(items, SplitRatios{0.5, 0.2, 0.2}, 1), DataError);
    }
}

TEST_CASE("relation: truth table is exactly the modular rule") {
    RelationSpec spec;
    spec.num_classes = 10;
    spec.positive_shifts = {1, 2};
    int positives = 0;
    for (int cx = 0; cx < 10; ++cx)
        for (int cy = 0; cy < 10; ++cy) {
            const bool expect = cy == (cx + 1) % 10 || cy == (cx + 2) % 10;
            CHECK(spec.positive(cx, cy) == expect);
            positives += expect;
        }
    CHECK(positives == 20);  // 2C

    // Asymmetry witness.
    CHECK(spec.positive(0, 1));
    CHECK_FALSE(spec.positive(1, 0));

    // Reordering flips positives whenever the shift set and its mirror are
    // disjoint (true for {1,2} mod 10).
    for (int cx = 0; cx < 10; ++cx)
        for (int cy = 0; cy < 10; ++cy)
            if (spec.positive(cx, cy)) CHECK_FALSE(spec.positive(cy, cx));
}

TEST_CASE("build_pairs: candidate classes, labels, balance") {
    RelationSpec spec;
    spec.num_classes = 10;
    spec.positive_shifts = {1, 2};
    auto items = gen_procedural_items(100, spec, 8, 23);

    PairSet pairs = build_pairs(items, spec, 10, 31);  // 10,000 pairs
    REQUIRE(pairs.size() == 10000);

    std::int64_t positives = 0;
    for (const auto& t : pairs.triples) {
        const int cx = items.labels[static_cast<std::size_t>(t.query_id)];
        const int cy = items.labels[static_cast<std::size_t>(t.candidate_id)];
        CHECK((t.label == 1) == spec.positive(cx, cy));
        if (cx == 0 && t.label == 1) CHECK((cy == 1 || cy == 2));
        positives += t.label == 1;
    }
    const double frac = static_cast<double>(positives) / 10000.0;
    CHECK(frac >= 0.47);
    CHECK(frac <= 0.53);

    SUBCASE("missing positive candidates is an error") {
        RelationSpec s2;
        s2.num_classes = 4;
        s2.positive_shifts = {1};
        std::vector<int> labels = {0, 0, 3};
        std::vector<std::int64_t> ids = {0, 1, 2};
        CHECK_THROWS_AS(build_pairs_from_labels(labels, ids, s2, 1, 1), DataError);
    }
}

TEST_CASE("pairs csv round trip") {
    PairSet p;
    p.triples = {{0, 5, 1}, {3, 2, -1}, {7, 7, -1}};
    const std::string path = tmp_path("pairs.csv");
    save_pairs_csv(p, path);
    auto back = load_pairs_csv(path);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.triples[i].query_id == p.triples[i].query_id);
        CHECK(back.triples[i].candidate_id == p.triples[i].candidate_id);
        CHECK(back.triples[i].label == p.triples[i].label);
    }
}
