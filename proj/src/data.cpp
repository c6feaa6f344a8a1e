#include "aimlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

#include "aimlab/errors.hpp"

namespace aimlab {

namespace {

constexpr char kMagic[4] = {'A', 'I', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("truncated: header field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string manifest_path(const std::string& pack_path) { return pack_path + ".splits.json"; }

} // namespace

std::string to_string(Split split) {
    switch (split) {
        case Split::MetaTrain: return "meta_train";
        case Split::MetaVal: return "meta_val";
        case Split::MetaTest: return "meta_test";
    }
    return "?";
}

const std::vector<std::uint32_t>& SplitManifest::classes(Split split) const {
    switch (split) {
        case Split::MetaTrain: return meta_train;
        case Split::MetaVal: return meta_val;
        case Split::MetaTest: return meta_test;
    }
    return meta_train;
}

std::size_t PackedDataset::class_count() const {
    std::uint32_t mx = 0;
    for (auto l : labels) mx = std::max(mx, l);
    return labels.empty() ? 0 : static_cast<std::size_t>(mx) + 1;
}

Tensor PackedDataset::image(std::size_t i) const {
    if (i >= n) throw ContractError("image: index out of range");
    const std::size_t px = pixels();
    std::vector<double> v(px);
    if (dtype == Dtype::U8) {
        for (std::size_t j = 0; j < px; ++j) {
            v[j] = static_cast<double>(raw_u8[i * px + j]) / 255.0;
        }
    } else {
        std::copy(raw_f64.begin() + i * px, raw_f64.begin() + (i + 1) * px, v.begin());
    }
    return Tensor::from(std::move(v), {channels, height, width});
}

void PackedDataset::build_index() const {
    by_class_.assign(class_count(), {});
    for (std::size_t i = 0; i < labels.size(); ++i) by_class_[labels[i]].push_back(i);
}

const std::vector<std::size_t>& PackedDataset::class_indices(std::uint32_t class_id) const {
    if (by_class_.empty()) build_index();
    if (class_id >= by_class_.size()) throw ContractError("class_indices: unknown class");
    return by_class_[class_id];
}

void PackedDataset::validate() const {
    const std::size_t px = pixels();
    const std::size_t expect = n * px;
    if (dtype == Dtype::U8 ? raw_u8.size() != expect : raw_f64.size() != expect) {
        throw ParseError("truncated: image payload size mismatch");
    }
    if (labels.size() != n) throw ParseError("truncated: label array size mismatch");
    for (auto l : labels) {
        if (l >= n) throw ParseError("label out of range: " + std::to_string(l));
    }
    const std::size_t classes = class_count();
    std::set<std::uint32_t> seen;
    auto check_split = [&](const std::vector<std::uint32_t>& ids, const char* name) {
        for (auto id : ids) {
            if (id >= classes) {
                throw ParseError(std::string("split manifest: class ") + std::to_string(id) +
                                 " in " + name + " does not exist");
            }
            if (!seen.insert(id).second) {
                throw ContractError(std::string("split manifest: class ") + std::to_string(id) +
                                    " appears in more than one split");
            }
        }
    };
    check_split(splits.meta_train, "meta_train");
    check_split(splits.meta_val, "meta_val");
    check_split(splits.meta_test, "meta_test");
    build_index(); // samplers may run concurrently; index once, up front
}

PackedDataset load_packed(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path);

    char magic[4];
    if (!is.read(magic, 4)) throw ParseError("truncated: missing magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError("bad magic in " + path);
    const std::uint32_t version = get_u32(is);
    if (version != kVersion) throw ParseError("unsupported version " + std::to_string(version));

    PackedDataset ds;
    ds.n = get_u32(is);
    ds.channels = get_u32(is);
    ds.height = get_u32(is);
    ds.width = get_u32(is);
    std::uint8_t tag = 0;
    if (!is.read(reinterpret_cast<char*>(&tag), 1)) throw ParseError("truncated: dtype tag");
    if (tag > 1) throw ParseError("unknown dtype tag " + std::to_string(tag));
    ds.dtype = static_cast<PackedDataset::Dtype>(tag);

    ds.labels.resize(ds.n);
    for (auto& l : ds.labels) l = get_u32(is);

    const std::size_t px = ds.pixels();
    if (ds.dtype == PackedDataset::Dtype::U8) {
        ds.raw_u8.resize(ds.n * px);
        if (!is.read(reinterpret_cast<char*>(ds.raw_u8.data()),
                     static_cast<std::streamsize>(ds.raw_u8.size()))) {
            throw ParseError("truncated: image payload");
        }
    } else {
        ds.raw_f64.resize(ds.n * px);
        for (auto& v : ds.raw_f64) {
            unsigned char b[8];
            if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("truncated: image payload");
            std::uint64_t bits = 0;
            for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
            std::memcpy(&v, &bits, 8);
        }
    }

    // adjacent split manifest; absent means everything is meta-train
    std::ifstream ms(manifest_path(path));
    if (ms) {
        nlohmann::json j;
        try {
            ms >> j;
        } catch (const std::exception& e) {
            throw ParseError(std::string("split manifest: ") + e.what());
        }
        auto read_ids = [&](const char* key) {
            std::vector<std::uint32_t> ids;
            if (j.contains(key)) {
                for (const auto& v : j[key]) ids.push_back(v.get<std::uint32_t>());
            }
            return ids;
        };
        ds.splits.meta_train = read_ids("meta_train");
        ds.splits.meta_val = read_ids("meta_val");
        ds.splits.meta_test = read_ids("meta_test");
        if (j.contains("prototypes")) {
            for (const auto& p : j["prototypes"]) {
                ds.prototypes.push_back(p.get<std::vector<double>>());
            }
        }
        if (j.contains("class_names")) {
            ds.class_names = j["class_names"].get<std::vector<std::string>>();
        }
    } else {
        ds.splits.meta_train.resize(ds.class_count());
        std::iota(ds.splits.meta_train.begin(), ds.splits.meta_train.end(), 0);
    }

    ds.validate();
    return ds;
}

void save_packed(const PackedDataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot write " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(ds.n));
    put_u32(os, static_cast<std::uint32_t>(ds.channels));
    put_u32(os, static_cast<std::uint32_t>(ds.height));
    put_u32(os, static_cast<std::uint32_t>(ds.width));
    const std::uint8_t tag = static_cast<std::uint8_t>(ds.dtype);
    os.write(reinterpret_cast<const char*>(&tag), 1);
    for (auto l : ds.labels) put_u32(os, l);
    if (ds.dtype == PackedDataset::Dtype::U8) {
        os.write(reinterpret_cast<const char*>(ds.raw_u8.data()),
                 static_cast<std::streamsize>(ds.raw_u8.size()));
    } else {
        for (double v : ds.raw_f64) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            unsigned char b[8];
            for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
            os.write(reinterpret_cast<const char*>(b), 8);
        }
    }

    nlohmann::ordered_json j;
    j["meta_train"] = ds.splits.meta_train;
    j["meta_val"] = ds.splits.meta_val;
    j["meta_test"] = ds.splits.meta_test;
    if (!ds.class_names.empty()) j["class_names"] = ds.class_names;
    if (!ds.prototypes.empty()) j["prototypes"] = ds.prototypes;
    std::ofstream ms(manifest_path(path));
    ms << j.dump(1) << "\n";
}

void EpisodeSpec::validate() const {
    if (ways < 2) throw ContractError("episode: ways must be at least 2");
    if (shots < 1 || queries < 1) throw ContractError("episode: shots and queries must be positive");
}

Episode sample_episode(const PackedDataset& ds, const EpisodeSpec& spec, Split split, Rng& rng) {
    spec.validate();
    const std::size_t need = spec.shots + spec.queries;
    std::vector<std::uint32_t> eligible;
    for (auto c : ds.splits.classes(split)) {
        if (ds.class_indices(c).size() >= need) eligible.push_back(c);
    }
    if (eligible.size() < spec.ways) {
        throw ContractError("sample_episode: split " + to_string(split) + " has only " +
                            std::to_string(eligible.size()) + " classes with " +
                            std::to_string(need) + "+ samples, need " + std::to_string(spec.ways));
    }
    // uniform k-subset via partial shuffle
    for (std::size_t i = 0; i < spec.ways; ++i) {
        std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
    }
    Episode ep;
    ep.classes.assign(eligible.begin(), eligible.begin() + spec.ways);
    for (std::size_t rel = 0; rel < spec.ways; ++rel) {
        auto idx = ds.class_indices(ep.classes[rel]);
        for (std::size_t i = 0; i < need; ++i) {
            std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        }
        for (std::size_t i = 0; i < spec.shots; ++i) ep.support.push_back({idx[i], rel});
        for (std::size_t i = spec.shots; i < need; ++i) ep.query.push_back({idx[i], rel});
    }
    return ep;
}

Trajectory trajectory_over_classes(const PackedDataset& ds,
                                   const std::vector<std::uint32_t>& classes, std::size_t shots,
                                   Rng& rng) {
    Trajectory tr;
    for (auto c : classes) {
        auto idx = ds.class_indices(c);
        if (idx.size() <= shots) {
            throw ContractError("trajectory: class " + std::to_string(c) + " has " +
                                std::to_string(idx.size()) + " samples, need more than " +
                                std::to_string(shots));
        }
        rng.shuffle(idx);
        TrajectoryTask task;
        task.class_id = c;
        task.support.assign(idx.begin(), idx.begin() + shots);
        task.test.assign(idx.begin() + shots, idx.end());
        tr.tasks.push_back(std::move(task));
    }
    return tr;
}

Trajectory sample_trajectory(const PackedDataset& ds, std::size_t classes_per_traj,
                             std::size_t shots, Split split, Rng& rng) {
    if (classes_per_traj < 1) throw ContractError("trajectory: needs at least one class");
    std::vector<std::uint32_t> pool;
    for (auto c : ds.splits.classes(split)) {
        if (ds.class_indices(c).size() > shots) pool.push_back(c);
    }
    if (pool.size() < classes_per_traj) {
        throw ContractError("sample_trajectory: split " + to_string(split) + " has only " +
                            std::to_string(pool.size()) + " usable classes, need " +
                            std::to_string(classes_per_traj));
    }
    for (std::size_t i = 0; i < classes_per_traj; ++i) {
        std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    pool.resize(classes_per_traj);
    return trajectory_over_classes(ds, pool, shots, rng);
}

void SyntheticSpec::validate() const {
    if (classes < 2) throw ContractError("synthetic: need at least two classes");
    if (samples_per_class < 1 || image_size < 1) {
        throw ContractError("synthetic: samples and image size must be positive");
    }
    if (noise_std < 0.0) throw ContractError("synthetic: noise_std must be nonnegative");
    if (val_classes + test_classes >= classes) {
        throw ContractError("synthetic: val + test classes must leave at least one train class");
    }
}

PackedDataset gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    PackedDataset ds;
    ds.dtype = PackedDataset::Dtype::F64;
    ds.n = spec.classes * spec.samples_per_class;
    ds.channels = 1;
    ds.height = spec.image_size;
    ds.width = spec.image_size;
    const std::size_t px = ds.pixels();

    Rng proto_rng(spec.prototype_seed);
    ds.prototypes.resize(spec.classes);
    for (auto& proto : ds.prototypes) {
        proto.resize(px);
        // glyph-like prototypes: a sparse set of bright pixels on a dark
        // background keeps class vectors far apart in angle
        for (auto& p : proto) {
            p = proto_rng.uniform() < 0.15 ? proto_rng.uniform(0.7, 0.95)
                                           : proto_rng.uniform(0.05, 0.15);
        }
    }

    ds.raw_f64.reserve(ds.n * px);
    ds.labels.reserve(ds.n);
    for (std::uint32_t c = 0; c < spec.classes; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            for (std::size_t j = 0; j < px; ++j) {
                double v = ds.prototypes[c][j] + rng.gaussian(0.0, spec.noise_std);
                ds.raw_f64.push_back(std::clamp(v, 0.0, 1.0));
            }
            ds.labels.push_back(c);
        }
    }

    const std::size_t train = spec.classes - spec.val_classes - spec.test_classes;
    for (std::uint32_t c = 0; c < spec.classes; ++c) {
        if (c < train) {
            ds.splits.meta_train.push_back(c);
        } else if (c < train + spec.val_classes) {
            ds.splits.meta_val.push_back(c);
        } else {
            ds.splits.meta_test.push_back(c);
        }
    }
    ds.validate();
    return ds;
}

double nearest_prototype_accuracy(const PackedDataset& ds) {
    if (ds.prototypes.empty()) throw ContractError("nearest_prototype_accuracy: no prototypes");
    const std::size_t px = ds.pixels();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        Tensor img = ds.image(i);
        double best = 0.0;
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < ds.prototypes.size(); ++c) {
            double dist = 0.0;
            for (std::size_t j = 0; j < px; ++j) {
                const double d = img.at(j) - ds.prototypes[c][j];
                dist += d * d;
            }
            if (c == 0 || dist < best) {
                best = dist;
                best_c = c;
            }
        }
        hits += best_c == ds.labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.n);
}

} // namespace aimlab
