#include "karma/params.hpp"

#include <cstring>

#include "binio.hpp"

namespace karma::model {

void ParamStore::add(const std::string& name, nd::Tensor t) {
    if (tensors.count(name)) throw UsageError("ParamStore: duplicate tensor '" + name + "'");
    names.push_back(name);
    tensors.emplace(name, std::move(t));
}

nd::Tensor& ParamStore::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw UsageError("ParamStore: no tensor '" + name + "'");
    return it->second;
}

const nd::Tensor& ParamStore::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw UsageError("ParamStore: no tensor '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& n : names)
        if (at(n).requires_grad()) out.push_back(n);
    return out;
}

void ParamStore::zero_grads() {
    for (const auto& n : names) {
        auto& t = tensors.at(n);
        if (t.requires_grad()) t.zero_grad();
    }
}

std::int64_t ParamStore::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& n : names)
        if (at(n).requires_grad()) total += at(n).size();
    return total;
}

std::uint64_t ParamStore::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& n : names) {
        mix_bytes(n.data(), n.size());
        const auto& v = at(n).values();
        mix_bytes(v.data(), v.size() * sizeof(double));
    }
    return h;
}

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void write_entry(binio::Writer& w, const std::string& name, const nd::Shape& shape,
                 const std::vector<double>& data) {
    if (name.size() > 0xFFFF) throw UsageError("checkpoint: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
    for (double v : data) w.f64(v);
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
    binio::Writer w(path.string());
    w.magic("KCKP");
    w.u32(kFormatVersion);

    std::uint32_t count = static_cast<std::uint32_t>(store.names.size());
    for (const auto& n : store.names) {
        if (store.opt_m.count(n)) ++count;
        if (store.opt_v.count(n)) ++count;
    }
    w.u32(count);
    for (const auto& n : store.names) {
        const auto& t = store.at(n);
        write_entry(w, n, t.shape(), t.values());
    }
    for (const auto& n : store.names) {
        const auto& t = store.at(n);
        auto m = store.opt_m.find(n);
        if (m != store.opt_m.end()) write_entry(w, "opt.m." + n, t.shape(), m->second);
        auto v = store.opt_v.find(n);
        if (v != store.opt_v.end()) write_entry(w, "opt.v." + n, t.shape(), v->second);
    }
    w.u64(store.step);
    w.close();
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
    binio::Reader r(path.string());
    r.expect_magic("KCKP");
    std::uint32_t version = r.u32("version");
    if (version != kFormatVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
    std::uint32_t count = r.u32("tensor count");
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = r.u16("name length");
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len, "name");
        std::uint8_t rank = r.u8("rank");
        nd::Shape shape(rank);
        std::int64_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            shape[d] = r.u32("extent");
            n *= shape[d];
        }
        if (n <= 0 || n > (1ll << 31))
            throw FormatError(path.string() + ": extent overflow at byte " +
                              std::to_string(r.offset()));
        std::vector<double> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = r.f64("payload");
        if (name.rfind("opt.m.", 0) == 0) {
            store.opt_m[name.substr(6)] = std::move(data);
        } else if (name.rfind("opt.v.", 0) == 0) {
            store.opt_v[name.substr(6)] = std::move(data);
        } else {
            store.add(name, nd::Tensor::from_vector(std::move(shape), std::move(data),
                                                    is_trainable_name(name)));
        }
    }
    store.step = r.u64("step counter");
    if (!r.at_eof())
        throw FormatError(path.string() + ": trailing bytes at byte " + std::to_string(r.offset()));
    for (const auto& [name, m] : store.opt_m)
        if (!store.has(name))
            throw FormatError(path.string() + ": orphan optimizer moment for '" + name + "'");
    return store;
}

}  // namespace karma::model
