// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mhim/io.hpp"
#include "mhim/matrix.hpp"
#include "mhim/mining.hpp"
#include "mhim/rng.hpp"

namespace mhim {

/// One bag: instance features and a bag label. Instance labels are not part
/// of this type; synthetic ground truth lives in PlantedLabels.
struct Bag {
    std::string id;
    Matrix features;  // N x D_in
    std::size_t label = 0;

    std::size_t size() const { return features.rows(); }
};

/// Diagnostics-only planted instance labels of a synthetic bag.
struct PlantedLabels {
    std::string bag_id;
    std::vector<std::uint8_t> positive;  // 1 = planted positive instance
};

struct SyntheticSpec {
    std::size_t n_bags = 200;
    std::size_t min_instances = 128;
    std::size_t max_instances = 384;
    std::size_t input_dim = 64;
    double positive_ratio = 0.05;
    double separation = 2.0;
    double noise_ratio = 0.1;

    void validate() const {
        if (n_bags < 2) throw ConfigError("synthetic.n_bags must be >= 2");
        if (min_instances == 0 || min_instances > max_instances)
            throw ConfigError("synthetic instance range must satisfy 1 <= min <= max");
        if (input_dim == 0) throw ConfigError("synthetic.input_dim must be > 0");
        if (!(positive_ratio > 0.0 && positive_ratio < 1.0))
            throw ConfigError("synthetic.positive_ratio must lie in (0, 1)");
        if (!(noise_ratio >= 0.0 && noise_ratio < 1.0) || positive_ratio + noise_ratio >= 1.0)
            throw ConfigError("synthetic.noise_ratio must lie in [0, 1 - positive_ratio)");
        if (!(separation >= 0.0)) throw ConfigError("synthetic.separation must be >= 0");
    }
};

struct SyntheticDataset {
    std::vector<Bag> bags;
    std::vector<PlantedLabels> planted;  // parallel to bags
};

namespace detail {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
    std::vector<double> u(dim);
    double norm = 0.0;
    while (norm == 0.0) {
        for (double& v : u) v = rng.normal();
        norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
    }
    for (double& v : u) v /= norm;
    return u;
}

}  // namespace detail

/**
 * Synthetic rare-positive MIL data. Bags alternate negative/positive labels.
 * Background instances ~ N(0, I); a positive bag replaces ceil(rho N)
 * instances with N(delta u, I); every bag replaces ceil(noise N) further
 * instances with far outliers N(3 delta w, 4 I). u and w are random unit
 * directions fixed per dataset.
 */
inline SyntheticDataset generate(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng dir_rng(seed, "synthetic.directions");
    const auto pos_dir = detail::random_unit(spec.input_dim, dir_rng);
    const auto noise_dir = detail::random_unit(spec.input_dim, dir_rng);

    SyntheticDataset ds;
    const int width = static_cast<int>(std::to_string(spec.n_bags - 1).size());
    for (std::size_t b = 0; b < spec.n_bags; ++b) {
        Rng rng(seed, "synthetic.bag", b);
        const std::size_t label = b % 2;
        const std::size_t n = rng.uniform_index(spec.min_instances, spec.max_instances);
        const std::size_t n_pos = label == 1 ? std::max<std::size_t>(1, ceil_count(spec.positive_ratio, n)) : 0;
        const std::size_t n_noise = std::min(ceil_count(spec.noise_ratio, n), n - n_pos);

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::vector<std::size_t> special = sample_without_replacement(order, n_pos + n_noise, rng);

        Bag bag;
        std::string idx = std::to_string(b);
        bag.id = "bag_" + std::string(static_cast<std::size_t>(width) - idx.size(), '0') + idx;
        bag.label = label;
        bag.features = Matrix(n, spec.input_dim);
        PlantedLabels planted{bag.id, std::vector<std::uint8_t>(n, 0)};
        std::vector<std::uint8_t> kind(n, 0);  // 0 background, 1 positive, 2 noise
        for (std::size_t s = 0; s < special.size(); ++s) kind[special[s]] = s < n_pos ? 1 : 2;
        for (std::size_t i = 0; i < n; ++i) {
            auto row = bag.features.row(i);
            const double sd = kind[i] == 2 ? 2.0 : 1.0;
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                double mean = 0.0;
                if (kind[i] == 1) mean = spec.separation * pos_dir[j];
                if (kind[i] == 2) mean = 3.0 * spec.separation * noise_dir[j];
                row[j] = rng.normal(mean, sd);
            }
            planted.positive[i] = kind[i] == 1 ? 1 : 0;
        }
        ds.bags.push_back(std::move(bag));
        ds.planted.push_back(std::move(planted));
    }
    return ds;
}

// --- BAGF ------------------------------------------------------------------
//
// magic "BAGF" | version u8 = 1 | label u8 | reserved u16 = 0 | N u32 | D u32 |
// N*D float32 row-major. All integers and floats little-endian, no trailing bytes.

inline constexpr std::size_t kBagfHeaderSize = 16;

inline std::string encode_bagfile(const Bag& bag) {
    if (bag.label > 255) throw ContractError("BAGF label must fit in one byte");
    std::string out;
    out.reserve(kBagfHeaderSize + bag.features.size() * 4);
    out.append("BAGF", 4);
    out.push_back(static_cast<char>(1));
    out.push_back(static_cast<char>(bag.label));
    io::put_le<std::uint16_t>(out, 0);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bag.features.rows()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bag.features.cols()));
    for (double v : bag.features.values())
        io::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

inline Bag decode_bagfile(std::string_view bytes, std::string id) {
    auto fail = [&](std::size_t offset, const std::string& what) {
        return LoadError("BAGF " + id + ": " + what + " at byte offset " + std::to_string(offset));
    };
    if (bytes.size() < kBagfHeaderSize) throw fail(bytes.size(), "truncated header");
    if (bytes.substr(0, 4) != "BAGF") throw fail(0, "bad magic");
    if (static_cast<std::uint8_t>(bytes[4]) != 1) throw fail(4, "unsupported version");
    Bag bag;
    bag.id = std::move(id);
    bag.label = static_cast<std::uint8_t>(bytes[5]);
    if (io::get_le<std::uint16_t>(bytes, 6) != 0) throw fail(6, "nonzero reserved field");
    const std::uint32_t n = io::get_le<std::uint32_t>(bytes, 8);
    const std::uint32_t d = io::get_le<std::uint32_t>(bytes, 12);
    if (n == 0) throw fail(8, "empty bag (N = 0)");
    if (d == 0) throw fail(12, "zero feature dimension");
    const std::size_t expected = kBagfHeaderSize + std::size_t{n} * d * 4;
    if (bytes.size() < expected) throw fail(bytes.size(), "truncated feature block");
    if (bytes.size() > expected) throw fail(expected, "trailing bytes");
    bag.features = Matrix(n, d);
    for (std::size_t k = 0; k < std::size_t{n} * d; ++k) {
        const std::size_t off = kBagfHeaderSize + 4 * k;
        const float f = std::bit_cast<float>(io::get_le<std::uint32_t>(bytes, off));
        if (!std::isfinite(f)) throw fail(off, "non-finite feature value");
        bag.features[k] = static_cast<double>(f);
    }
    return bag;
}

inline void save_bagfile(const std::filesystem::path& path, const Bag& bag) {
    io::write_file_atomic(path, encode_bagfile(bag));
}

/// Reads one BAGF file; the bag id is the file stem.
inline Bag load_bagfile(const std::filesystem::path& path) {
    return decode_bagfile(io::read_file(path), path.stem().string());
}

/// Writes one BAGF per bag plus manifest.csv (bag_id,path,label) into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Bag>& bags) {
    std::filesystem::create_directories(dir / "bags");
    std::ostringstream manifest;
    manifest << "bag_id,path,label\n";
    for (const Bag& b : bags) {
        const std::string rel = "bags/" + b.id + ".bagf";
        save_bagfile(dir / rel, b);
        manifest << b.id << ',' << rel << ',' << b.label << '\n';
    }
    io::write_file_atomic(dir / "manifest.csv", manifest.str());
}

/// Loads a dataset from a manifest CSV; relative paths resolve against its directory.
inline std::vector<Bag> load_manifest(const std::filesystem::path& manifest) {
    std::istringstream in(io::read_file(manifest));
    std::string line;
    std::getline(in, line);
    if (line.rfind("bag_id,path,label", 0) != 0)
        throw LoadError("manifest " + manifest.string() + ": missing header bag_id,path,label");
    std::vector<Bag> bags;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string id, path, label;
        if (!std::getline(fields, id, ',') || !std::getline(fields, path, ',') ||
            !std::getline(fields, label)) {
            throw LoadError("manifest " + manifest.string() + ": malformed line " +
                            std::to_string(line_no));
        }
        std::filesystem::path p(path);
        if (p.is_relative()) p = manifest.parent_path() / p;
        Bag bag = decode_bagfile(io::read_file(p), id);
        std::size_t declared = 0;
        try {
            declared = std::stoul(label);
        } catch (const std::exception&) {
            throw LoadError("manifest line " + std::to_string(line_no) + ": bad label '" + label + "'");
        }
        if (declared != bag.label)
            throw LoadError("manifest label for " + id + " disagrees with its BAGF header");
        bags.push_back(std::move(bag));
    }
    if (bags.empty()) throw LoadError("manifest " + manifest.string() + " lists no bags");
    return bags;
}

// --- folds -----------------------------------------------------------------

struct Fold {
    std::vector<std::size_t> train;  // indices into the bag list
    std::vector<std::size_t> test;
};

struct FoldSplit {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<Fold> folds;
};

/**
 * Stratified k-fold split. Each class is shuffled with the seed and the
 * concatenated class lists are dealt round-robin, so fold sizes and
 * per-class counts differ by at most one.
 */
inline FoldSplit kfold(std::span<const std::size_t> labels, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ConfigError("kfold: k must be >= 2");
    if (k > labels.size())
        throw ConfigError("kfold: k = " + std::to_string(k) + " exceeds bag count " +
                          std::to_string(labels.size()));
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    if (by_class.size() < 2) throw ConfigError("kfold: stratification needs at least two classes");

    Rng rng(seed, "kfold");
    std::vector<std::size_t> dealt;
    for (auto& [cls, members] : by_class) {
        members = sample_without_replacement(members, members.size(), rng);
        dealt.insert(dealt.end(), members.begin(), members.end());
    }
    FoldSplit split{k, seed, std::vector<Fold>(k)};
    std::vector<std::size_t> fold_of(labels.size());
    for (std::size_t pos = 0; pos < dealt.size(); ++pos) fold_of[dealt[pos]] = pos % k;
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t f = 0; f < k; ++f) (fold_of[i] == f ? split.folds[f].test : split.folds[f].train).push_back(i);
    return split;
}

inline FoldSplit kfold(const std::vector<Bag>& bags, std::size_t k, std::uint64_t seed) {
    std::vector<std::size_t> labels;
    for (const Bag& b : bags) labels.push_back(b.label);
    return kfold(labels, k, seed);
}

/// True when every test fold holds at least one bag of each class present.
inline bool folds_cover_all_classes(const FoldSplit& split, std::span<const std::size_t> labels) {
    std::vector<std::size_t> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (const Fold& f : split.folds) {
        for (std::size_t c : classes) {
            if (std::none_of(f.test.begin(), f.test.end(), [&](std::size_t i) { return labels[i] == c; }))
                return false;
        }
    }
    return true;
}

}  // namespace mhim
