#include "px3d/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "px3d/error.hpp"
#include "px3d/io.hpp"

namespace px3d {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'X', '3', 'D', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t off) {
    T v;
    std::memcpy(&v, bytes.data() + off, sizeof(T));
    return v;
}

}  // namespace

const Checkpoint::Blob* Checkpoint::find(const std::string& name) const {
    for (const auto& b : blobs)
        if (b.name == name) return &b;
    return nullptr;
}

Checkpoint capture(const nn::ParamList& params, const nn::Adam* optimizer) {
    Checkpoint c;
    for (const auto& p : params.params) {
        const auto v = p.param.values();
        c.blobs.push_back({"param:" + p.name, p.param.shape(), std::vector<double>(v.begin(), v.end())});
    }
    for (const auto& b : params.buffers)
        c.blobs.push_back({"buffer:" + b.name, {static_cast<std::int64_t>(b.data->size())}, *b.data});
    if (optimizer) {
        const auto& st = optimizer->state();
        for (std::size_t k = 0; k < params.params.size(); ++k) {
            const auto& p = params.params[k];
            c.blobs.push_back({"adam.m:" + p.name, p.param.shape(), st.m[k]});
            c.blobs.push_back({"adam.v:" + p.name, p.param.shape(), st.v[k]});
        }
        c.step = st.step;
    }
    return c;
}

void restore(const Checkpoint& ckpt, nn::ParamList& params, nn::Adam* optimizer) {
    auto need = [&](const std::string& name, std::size_t size) -> const Checkpoint::Blob& {
        const auto* b = ckpt.find(name);
        if (!b) throw FormatError("checkpoint: missing blob " + name);
        if (b->data.size() != size)
            throw FormatError("checkpoint: blob " + name + " has " + std::to_string(b->data.size()) + " values, expected " +
                              std::to_string(size));
        return *b;
    };
    for (auto& p : params.params) {
        const auto& b = need("param:" + p.name, static_cast<std::size_t>(p.param.numel()));
        auto dst = p.param.mutable_values();
        std::copy(b.data.begin(), b.data.end(), dst.begin());
        p.param.zero_grad();
    }
    for (auto& buf : params.buffers) *buf.data = need("buffer:" + buf.name, buf.data->size()).data;
    if (optimizer) {
        auto& st = optimizer->state();
        for (std::size_t k = 0; k < params.params.size(); ++k) {
            const auto& p = params.params[k];
            st.m[k] = need("adam.m:" + p.name, st.m[k].size()).data;
            st.v[k] = need("adam.v:" + p.name, st.v[k].size()).data;
        }
        st.step = ckpt.step;
    }
}

std::string encode_checkpoint(const Checkpoint& c) {
    nlohmann::ordered_json h;
    h["format_version"] = c.version;
    h["kind"] = c.kind;
    h["model"] = c.model;
    h["extra"] = c.extra;
    h["step"] = c.step;
    h["rng_state"] = c.rng_state;
    h["config_hash"] = c.config_hash;
    nlohmann::ordered_json blobs = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& b : c.blobs) {
        blobs.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"count", b.data.size()}});
        offset += b.data.size();
    }
    h["blobs"] = blobs;
    const std::string header = h.dump();
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.version));
    put<std::uint64_t>(out, header.size());
    out += header;
    out.reserve(out.size() + offset * sizeof(double));
    for (const auto& b : c.blobs)
        out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size() * sizeof(double));
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw FormatError(origin + ": not a checkpoint (bad magic)");
    Checkpoint c;
    c.version = static_cast<int>(get<std::uint32_t>(bytes, 8));
    if (c.version != kCheckpointVersion)
        throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(c.version));
    const auto hlen = get<std::uint64_t>(bytes, 12);
    if (20 + hlen > bytes.size()) throw FormatError(origin + ": truncated checkpoint header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.substr(20, hlen));
        c.kind = h.at("kind").get<std::string>();
        c.model = h.at("model");
        c.extra = h.at("extra");
        c.step = h.at("step").get<std::int64_t>();
        c.rng_state = h.at("rng_state");
        c.config_hash = h.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": bad checkpoint header: " + e.what());
    }
    const std::size_t base = 20 + hlen;
    for (const auto& b : h.at("blobs")) {
        Checkpoint::Blob blob;
        blob.name = b.at("name").get<std::string>();
        blob.shape = b.at("shape").get<std::vector<std::int64_t>>();
        const auto off = b.at("offset").get<std::uint64_t>();
        const auto count = b.at("count").get<std::uint64_t>();
        if (base + (off + count) * sizeof(double) > bytes.size())
            throw FormatError(origin + ": truncated blob " + blob.name);
        blob.data.resize(count);
        std::memcpy(blob.data.data(), bytes.data() + base + off * sizeof(double), count * sizeof(double));
        c.blobs.push_back(std::move(blob));
    }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    io::atomic_write(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path), path.string());
}

std::string parameter_hash(const nn::ParamList& params) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& p : params.params) {
        const auto v = p.param.values();
        h = io::fnv1a64(std::as_bytes(v), h);
    }
    return io::hex64(h);
}

}  // namespace px3d
