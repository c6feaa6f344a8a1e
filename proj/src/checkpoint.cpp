#include "aimlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "aimlab/errors.hpp"

namespace aimlab {

void ParamMap::add(const std::string& name, const Tensor& t) {
    if (contains(name)) throw ContractError("param map: duplicate name " + name);
    items.emplace_back(name, t);
}

const Tensor* ParamMap::find(const std::string& name) const {
    for (const auto& [n, t] : items) {
        if (n == name) return &t;
    }
    return nullptr;
}

Tensor& ParamMap::at(const std::string& name) {
    for (auto& [n, t] : items) {
        if (n == name) return t;
    }
    throw ContractError("param map: unknown name " + name);
}

const Tensor& ParamMap::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw ContractError("param map: unknown name " + name);
    return *t;
}

std::vector<std::string> ParamMap::names() const {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(n);
    return out;
}

std::vector<Tensor> ParamMap::tensors(const std::vector<std::string>& names) const {
    std::vector<Tensor> out;
    out.reserve(names.size());
    for (const auto& n : names) out.push_back(at(n));
    return out;
}

std::size_t ParamMap::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.size();
    return n;
}

namespace {

constexpr char kMagic[4] = {'A', 'I', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("truncated: checkpoint field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("truncated: checkpoint field");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

} // namespace

void save_checkpoint(const ParamMap& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot write " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(params.items.size()));
    for (const auto& [name, t] : params.items) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u64(os, t.shape().size());
        for (auto d : t.shape()) put_u64(os, d);
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(os, bits);
        }
    }
}

ParamMap read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw ParseError("truncated: missing magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError("bad magic in " + path);
    const std::uint32_t version = get_u32(is);
    if (version != kVersion) throw ParseError("unsupported version " + std::to_string(version));

    ParamMap out;
    const std::uint32_t count = get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw ParseError("truncated: tensor name");
        const std::uint64_t rank = get_u64(is);
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(get_u64(is));
            n *= d;
        }
        std::vector<double> data(n);
        for (auto& v : data) {
            const std::uint64_t bits = get_u64(is);
            std::memcpy(&v, &bits, 8);
        }
        out.add(name, Tensor::from(std::move(data), std::move(shape)));
    }
    return out;
}

void load_checkpoint(ParamMap& params, const std::string& path) {
    ParamMap loaded = read_checkpoint(path);
    if (loaded.items.size() != params.items.size()) {
        throw ParseError("checkpoint holds " + std::to_string(loaded.items.size()) +
                         " tensors, model has " + std::to_string(params.items.size()));
    }
    for (auto& [name, t] : params.items) {
        const Tensor* src = loaded.find(name);
        if (!src) throw ParseError("checkpoint is missing tensor " + name);
        if (src->shape() != t.shape()) {
            throw ParseError("checkpoint tensor " + name + " has shape " +
                             shape_str(src->shape()) + ", model expects " + shape_str(t.shape()));
        }
        t.copy_data_from(*src);
    }
}

} // namespace aimlab
