#include "compatfam/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace compatfam {

void RelationSpec::validate() const {
    if (num_classes < 2) throw DataError("relation: need at least 2 classes");
    if (positive_shifts.empty()) throw DataError("relation: shift set is empty");
    for (int s : positive_shifts)
        if (s < 1 || s >= num_classes)
            throw DataError("relation: shift " + std::to_string(s) + " outside 1..C-1");
}

bool RelationSpec::positive(int cx, int cy) const {
    for (int s : positive_shifts)
        if ((cx + s) % num_classes == cy) return true;
    return false;
}

std::vector<int> RelationSpec::positive_classes(int cx) const {
    std::set<int> out;
    for (int s : positive_shifts) out.insert((cx + s) % num_classes);
    return {out.begin(), out.end()};
}

void ItemSet::validate(int num_classes) const {
    if (images.rank() != 3) throw DataError("items: images must be [n,H,W]");
    auto n = images.shape()[0];
    if (n != size() || static_cast<std::int64_t>(labels.size()) != n)
        throw DataError("items: count mismatch between images, labels, ids");
    if (height() < 8 || width() < 8) throw DataError("items: image side must be >= 8");
    std::unordered_set<std::int64_t> seen;
    for (auto id : ids)
        if (!seen.insert(id).second) throw DataError("items: duplicate id");
    for (int l : labels)
        if (l < 0 || l >= num_classes) throw DataError("items: label out of range");
}

std::int64_t FeatureSet::index_of(std::int64_t id) const {
    for (std::int64_t i = 0; i < size(); ++i)
        if (ids[i] == id) return i;
    throw DataError("unknown item id " + std::to_string(id));
}

FeatureSet flatten(const ItemSet& items) {
    FeatureSet f;
    auto n = items.size();
    auto d = items.height() * items.width();
    f.x = Tensor::zeros(n, d);
    std::copy(items.images.data(), items.images.data() + n * d, f.x.data());
    f.labels = items.labels;
    f.ids = items.ids;
    f.img_h = items.height();
    f.img_w = items.width();
    return f;
}

// ---------------------------------------------------------------------------
// Procedural glyphs

namespace {

// Ten distinct binary masks; class identity is carried by pixel support, so a
// linear classifier separates them regardless of the additive noise level.
void draw_glyph(int cls, int s, std::vector<double>& px) {
    auto at = [&](int r, int c) -> double& { return px[static_cast<std::size_t>(r * s + c)]; };
    const int t = std::max(1, s / 5);  // stroke thickness
    switch (cls % 10) {
        case 0:  // top horizontal bar
            for (int r = 0; r < t; ++r)
                for (int c = 0; c < s; ++c) at(r, c) = 1.0;
            break;
        case 1:  // middle horizontal bar
            for (int r = (s - t) / 2; r < (s - t) / 2 + t; ++r)
                for (int c = 0; c < s; ++c) at(r, c) = 1.0;
            break;
        case 2:  // bottom horizontal bar
            for (int r = s - t; r < s; ++r)
                for (int c = 0; c < s; ++c) at(r, c) = 1.0;
            break;
        case 3:  // left vertical bar
            for (int r = 0; r < s; ++r)
                for (int c = 0; c < t; ++c) at(r, c) = 1.0;
            break;
        case 4:  // middle vertical bar
            for (int r = 0; r < s; ++r)
                for (int c = (s - t) / 2; c < (s - t) / 2 + t; ++c) at(r, c) = 1.0;
            break;
        case 5:  // right vertical bar
            for (int r = 0; r < s; ++r)
                for (int c = s - t; c < s; ++c) at(r, c) = 1.0;
            break;
        case 6:  // main diagonal
            for (int r = 0; r < s; ++r)
                for (int c = 0; c < s; ++c)
                    if (std::abs(r - c) < t) at(r, c) = 1.0;
            break;
        case 7:  // anti-diagonal
            for (int r = 0; r < s; ++r)
                for (int c = 0; c < s; ++c)
                    if (std::abs(r + c - (s - 1)) < t) at(r, c) = 1.0;
            break;
        case 8: {  // filled center box
            const int lo = s / 3, hi = s - s / 3;
            for (int r = lo; r < hi; ++r)
                for (int c = lo; c < hi; ++c) at(r, c) = 1.0;
            break;
        }
        case 9:  // border frame
            for (int r = 0; r < s; ++r)
                for (int c = 0; c < s; ++c)
                    if (r < t || r >= s - t || c < t || c >= s - t) at(r, c) = 1.0;
            break;
    }
}

}  // namespace

ItemSet gen_procedural_items(int per_class, const RelationSpec& spec, int image_size,
                             std::uint64_t seed) {
    spec.validate();
    if (per_class < 1) throw DataError("gen: per_class must be >= 1");
    if (spec.num_classes > 10) throw DataError("gen: at most 10 glyph classes");
    if (image_size < 8) throw DataError("gen: image_size must be >= 8");

    const int C = spec.num_classes;
    const std::int64_t n = static_cast<std::int64_t>(per_class) * C;
    const int s = image_size;

    ItemSet items;
    items.images = Tensor({n, s, s});
    items.labels.resize(static_cast<std::size_t>(n));
    items.ids.resize(static_cast<std::size_t>(n));

    Rng rng(seed);
    const double noise_sigma = 0.05;
    std::vector<double> base(static_cast<std::size_t>(s * s));
    std::int64_t idx = 0;
    for (int cls = 0; cls < C; ++cls) {
        std::fill(base.begin(), base.end(), 0.0);
        draw_glyph(cls, s, base);
        for (int rep = 0; rep < per_class; ++rep, ++idx) {
            items.labels[static_cast<std::size_t>(idx)] = cls;
            items.ids[static_cast<std::size_t>(idx)] = idx;
            double* out = items.images.data() + idx * s * s;
            for (int p = 0; p < s * s; ++p) {
                double v = base[static_cast<std::size_t>(p)] + rng.normal(0.0, noise_sigma);
                out[p] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return items;
}

// ---------------------------------------------------------------------------
// IDX container

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("truncated file while reading " + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

ItemSet load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot open " + images_path);
    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot open " + labels_path);

    if (read_be32(fi, "images magic") != kIdxImagesMagic)
        throw DataError("bad magic in " + images_path);
    const std::int64_t n = read_be32(fi, "image count");
    const std::int64_t h = read_be32(fi, "image rows");
    const std::int64_t w = read_be32(fi, "image cols");

    if (read_be32(fl, "labels magic") != kIdxLabelsMagic)
        throw DataError("bad magic in " + labels_path);
    const std::int64_t nl = read_be32(fl, "label count");
    if (n != nl) throw DataError("count mismatch: " + std::to_string(n) + " images vs " +
                                 std::to_string(nl) + " labels");
    if (n == 0) throw DataError("empty IDX file");

    ItemSet items;
    items.images = Tensor({n, h, w});
    items.labels.resize(static_cast<std::size_t>(n));
    items.ids.resize(static_cast<std::size_t>(n));

    std::vector<unsigned char> buf(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < n; ++i) {
        fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!fi) throw DataError("truncated image data in " + images_path);
        double* out = items.images.data() + i * h * w;
        for (std::size_t p = 0; p < buf.size(); ++p) out[p] = buf[p] / 255.0;
        unsigned char lab;
        fl.read(reinterpret_cast<char*>(&lab), 1);
        if (!fl) throw DataError("truncated label data in " + labels_path);
        items.labels[static_cast<std::size_t>(i)] = lab;
        items.ids[static_cast<std::size_t>(i)] = i;
    }
    return items;
}

void save_idx(const ItemSet& items, const std::string& images_path,
              const std::string& labels_path) {
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot write " + images_path);
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot write " + labels_path);

    const std::int64_t n = items.size(), h = items.height(), w = items.width();
    write_be32(fi, kIdxImagesMagic);
    write_be32(fi, static_cast<std::uint32_t>(n));
    write_be32(fi, static_cast<std::uint32_t>(h));
    write_be32(fi, static_cast<std::uint32_t>(w));
    write_be32(fl, kIdxLabelsMagic);
    write_be32(fl, static_cast<std::uint32_t>(n));

    std::vector<unsigned char> buf(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* px = items.images.data() + i * h * w;
        for (std::size_t p = 0; p < buf.size(); ++p)
            buf[p] = static_cast<unsigned char>(std::lround(std::clamp(px[p], 0.0, 1.0) * 255.0));
        fi.write(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        unsigned char lab = static_cast<unsigned char>(items.labels[static_cast<std::size_t>(i)]);
        fl.write(reinterpret_cast<char*>(&lab), 1);
    }
    if (!fi || !fl) throw IoError("failed writing IDX files");
}

// ---------------------------------------------------------------------------
// Splits and pairs

std::array<ItemSet, 3> split_items(const ItemSet& items, SplitRatios ratios, std::uint64_t seed) {
    const double sum = ratios.train + ratios.val + ratios.test;
    if (ratios.train <= 0 || ratios.val <= 0 || ratios.test <= 0 || std::abs(sum - 1.0) > 1e-9)
        throw DataError("split: ratios must be positive and sum to 1");

    std::map<int, std::vector<std::int64_t>> by_class;  // class -> item indices
    for (std::int64_t i = 0; i < items.size(); ++i)
        by_class[items.labels[static_cast<std::size_t>(i)]].push_back(i);

    Rng rng(seed);
    std::array<std::vector<std::int64_t>, 3> pick;
    for (auto& [cls, idxs] : by_class) {
        if (idxs.size() < 3)
            throw DataError("split: class " + std::to_string(cls) + " has fewer than 3 items");
        rng.shuffle(idxs);
        const auto nc = static_cast<std::int64_t>(idxs.size());
        std::array<std::int64_t, 3> cnt;
        cnt[0] = static_cast<std::int64_t>(std::floor(nc * ratios.train + 0.5));
        cnt[1] = static_cast<std::int64_t>(std::floor(nc * (ratios.train + ratios.val) + 0.5)) -
                 cnt[0];
        cnt[2] = nc - cnt[0] - cnt[1];
        // Every split keeps at least one item of every class.
        for (int b = 0; b < 3; ++b) {
            while (cnt[static_cast<std::size_t>(b)] < 1) {
                int big = 0;
                for (int o = 1; o < 3; ++o)
                    if (cnt[static_cast<std::size_t>(o)] > cnt[static_cast<std::size_t>(big)])
                        big = o;
                --cnt[static_cast<std::size_t>(big)];
                ++cnt[static_cast<std::size_t>(b)];
            }
        }
        std::int64_t pos = 0;
        for (int b = 0; b < 3; ++b)
            for (std::int64_t i = 0; i < cnt[static_cast<std::size_t>(b)]; ++i, ++pos)
                pick[static_cast<std::size_t>(b)].push_back(idxs[static_cast<std::size_t>(pos)]);
    }

    const std::int64_t h = items.height(), w = items.width();
    std::array<ItemSet, 3> out;
    for (int b = 0; b < 3; ++b) {
        auto& sel = pick[static_cast<std::size_t>(b)];
        std::sort(sel.begin(), sel.end());
        ItemSet& dst = out[static_cast<std::size_t>(b)];
        const auto n = static_cast<std::int64_t>(sel.size());
        dst.images = Tensor({n, h, w});
        dst.labels.resize(static_cast<std::size_t>(n));
        dst.ids.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t src = sel[static_cast<std::size_t>(i)];
            std::copy(items.images.data() + src * h * w, items.images.data() + (src + 1) * h * w,
                      dst.images.data() + i * h * w);
            dst.labels[static_cast<std::size_t>(i)] = items.labels[static_cast<std::size_t>(src)];
            dst.ids[static_cast<std::size_t>(i)] = items.ids[static_cast<std::size_t>(src)];
        }
    }
    return out;
}

PairSet build_pairs_from_labels(const std::vector<int>& labels,
                                const std::vector<std::int64_t>& ids, const RelationSpec& spec,
                                int pairs_per_item, std::uint64_t seed,
                                double positive_fraction) {
    spec.validate();
    if (labels.empty() || labels.size() != ids.size())
        throw DataError("pairs: labels/ids empty or mismatched");
    if (pairs_per_item < 1) throw DataError("pairs: pairs_per_item must be >= 1");
    if (positive_fraction < 0.0 || positive_fraction > 1.0)
        throw DataError("pairs: positive_fraction must be in [0,1]");

    const int C = spec.num_classes;
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(C));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= C) throw DataError("pairs: label out of range");
        by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
    }

    // Candidate pools per query class.
    std::vector<std::vector<std::int64_t>> pos_pool(static_cast<std::size_t>(C));
    std::vector<std::vector<std::int64_t>> neg_pool(static_cast<std::size_t>(C));
    for (int cx = 0; cx < C; ++cx) {
        for (int cy = 0; cy < C; ++cy) {
            auto& src = by_class[static_cast<std::size_t>(cy)];
            auto& dst = spec.positive(cx, cy) ? pos_pool[static_cast<std::size_t>(cx)]
                                              : neg_pool[static_cast<std::size_t>(cx)];
            dst.insert(dst.end(), src.begin(), src.end());
        }
        if (!by_class[static_cast<std::size_t>(cx)].empty()) {
            if (pos_pool[static_cast<std::size_t>(cx)].empty())
                throw DataError("pairs: class " + std::to_string(cx) +
                                " has no positive candidates");
            if (neg_pool[static_cast<std::size_t>(cx)].empty())
                throw DataError("pairs: class " + std::to_string(cx) +
                                " has no negative candidates");
        }
    }

    Rng rng(seed);
    PairSet out;
    out.triples.reserve(labels.size() * static_cast<std::size_t>(pairs_per_item));
    for (int rep = 0; rep < pairs_per_item; ++rep) {
        for (std::size_t q = 0; q < labels.size(); ++q) {
            const int cx = labels[q];
            const bool want_pos = rng.uniform() < positive_fraction;
            const auto& pool = want_pos ? pos_pool[static_cast<std::size_t>(cx)]
                                        : neg_pool[static_cast<std::size_t>(cx)];
            const auto cand = pool[static_cast<std::size_t>(rng.below(pool.size()))];
            const int cy = labels[static_cast<std::size_t>(cand)];
            const int label = spec.positive(cx, cy) ? 1 : -1;
            out.triples.push_back({ids[q], ids[static_cast<std::size_t>(cand)], label});
        }
    }
    return out;
}

PairSet build_pairs(const ItemSet& items, const RelationSpec& spec, int pairs_per_item,
                    std::uint64_t seed, double positive_fraction) {
    if (items.size() == 0) throw DataError("pairs: empty item set");
    return build_pairs_from_labels(items.labels, items.ids, spec, pairs_per_item, seed,
                                   positive_fraction);
}

// ---------------------------------------------------------------------------
// CSV

void save_pairs_csv(const PairSet& pairs, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "query_id,candidate_id,label\n";
    for (const auto& t : pairs.triples)
        f << t.query_id << "," << t.candidate_id << "," << t.label << "\n";
    if (!f) throw IoError("failed writing " + path);
}

PairSet load_pairs_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "query_id,candidate_id,label")
        throw DataError("bad pairs csv header in " + path);
    PairSet out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        PairTriple t;
        char c1, c2;
        std::istringstream is(line);
        if (!(is >> t.query_id >> c1 >> t.candidate_id >> c2 >> t.label) || c1 != ',' || c2 != ',')
            throw DataError("bad pairs csv row: " + line);
        if (t.label != 1 && t.label != -1) throw DataError("bad pair label in " + path);
        out.triples.push_back(t);
    }
    return out;
}

void save_ids_csv(const std::vector<std::int64_t>& ids, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "id\n";
    for (auto id : ids) f << id << "\n";
    if (!f) throw IoError("failed writing " + path);
}

std::vector<std::int64_t> load_ids_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "id") throw DataError("bad ids csv header in " + path);
    std::vector<std::int64_t> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(std::stoll(line));
    }
    return out;
}

}  // namespace compatfam
