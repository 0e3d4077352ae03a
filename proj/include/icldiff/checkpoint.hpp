#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "model.hpp"

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then the f32 little-endian
// payloads at the offsets listed in the header's tensor directory (relative to the payload start).

namespace icl {

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'D', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion   = 1;

struct CheckpointTensor {
    std::string name;
    Tensor<float> data;
    bool frozen = false;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();  // effective run config
    Vocabulary vocab      = Vocabulary::standard();
    int64_t step          = 0;
    std::string rng_state;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const {
        for (auto& t : tensors) {
            if (t.name == name) {
                return &t;
            }
        }
        return nullptr;
    }
    bool has_group(ParamGroup g) const {
        for (auto& t : tensors) {
            if (param_group_of(t.name) == g) {
                return true;
            }
        }
        return false;
    }
};

struct TensorEntry {
    std::string name;
    ParamGroup group = ParamGroup::psi;
    Shape shape;
    bool frozen     = false;
    uint64_t offset = 0;
    uint64_t nbytes = 0;
};

struct CheckpointInfo {
    int version = 0;
    nlohmann::json config;
    nlohmann::json vocab;
    int64_t step = 0;
    std::string rng_state;
    std::vector<TensorEntry> tensors;
    uint64_t payload_start = 0;
};

namespace detail {

inline void put_u64le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; i++) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline uint64_t get_u64le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; i--) {
        v = (v << 8) | p[i];
    }
    return v;
}

inline uint32_t to_le(uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

}  // namespace detail

/// Writes atomically (temp file, then rename).
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    nlohmann::json dir = nlohmann::json::array();
    std::set<std::string> names;
    uint64_t offset = 0;
    for (auto& t : ck.tensors) {
        if (!names.insert(t.name).second) {
            throw CheckpointError("duplicate tensor name '" + t.name + "'");
        }
        const uint64_t nbytes = static_cast<uint64_t>(t.data.size()) * 4;
        dir.push_back({{"name", t.name},
                       {"group", param_group_name(param_group_of(t.name))},
                       {"shape", t.data.shape},
                       {"dtype", "f32"},
                       {"frozen", t.frozen},
                       {"offset", offset},
                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    nlohmann::json header = {{"format_version", kCheckpointVersion},
                             {"config", ck.config},
                             {"vocab", ck.vocab.to_json()},
                             {"step", ck.step},
                             {"rng_state", ck.rng_state},
                             {"payload_bytes", offset},
                             {"tensors", dir}};
    const std::string hs = header.dump();
    std::string blob(kCheckpointMagic, 8);
    detail::put_u64le(blob, hs.size());
    blob += hs;
    blob.reserve(blob.size() + offset);
    for (auto& t : ck.tensors) {
        for (float v : t.data.data) {
            uint32_t bits = detail::to_le(std::bit_cast<uint32_t>(v));
            blob.append(reinterpret_cast<const char*>(&bits), 4);
        }
    }
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot write checkpoint " + tmp.string());
        }
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) {
            throw IoError("failed writing checkpoint " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
    }
}

/// Parses magic and header only; payloads are not read.
inline CheckpointInfo read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    unsigned char pre[16];
    f.read(reinterpret_cast<char*>(pre), 16);
    if (f.gcount() != 16 || std::memcmp(pre, kCheckpointMagic, 8) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
    }
    const uint64_t hlen = detail::get_u64le(pre + 8);
    const auto fsize    = std::filesystem::file_size(path);
    if (hlen > fsize - 16) {
        throw CheckpointError("truncated checkpoint header in " + path.string());
    }
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    CheckpointInfo info;
    try {
        info.version = h.at("format_version").get<int>();
        if (info.version != kCheckpointVersion) {
            throw CheckpointError("checkpoint format version " + std::to_string(info.version) + " (expected " +
                                  std::to_string(kCheckpointVersion) + ") in " + path.string());
        }
        info.config    = h.at("config");
        info.vocab     = h.at("vocab");
        info.step      = h.at("step").get<int64_t>();
        info.rng_state = h.at("rng_state").get<std::string>();
        for (auto& e : h.at("tensors")) {
            TensorEntry te;
            te.name   = e.at("name").get<std::string>();
            te.group  = param_group_of(te.name);
            te.shape  = e.at("shape").get<Shape>();
            te.frozen = e.at("frozen").get<bool>();
            te.offset = e.at("offset").get<uint64_t>();
            te.nbytes = e.at("nbytes").get<uint64_t>();
            if (e.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError("tensor '" + te.name + "' has unsupported dtype");
            }
            if (te.nbytes != static_cast<uint64_t>(numel(te.shape)) * 4) {
                throw CheckpointError("tensor '" + te.name + "' payload length " + std::to_string(te.nbytes) +
                                      " does not match its shape " + shape_str(te.shape));
            }
            info.tensors.push_back(std::move(te));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    info.payload_start = 16 + hlen;
    return info;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    CheckpointInfo info = read_checkpoint_header(path);
    const auto fsize    = std::filesystem::file_size(path);
    Checkpoint ck;
    ck.config    = info.config;
    ck.vocab     = Vocabulary::from_json(info.vocab);
    ck.step      = info.step;
    ck.rng_state = info.rng_state;
    std::ifstream f(path, std::ios::binary);
    for (auto& e : info.tensors) {
        const uint64_t begin = info.payload_start + e.offset;
        if (begin + e.nbytes > fsize) {
            throw CheckpointError("truncated checkpoint " + path.string() + ": tensor '" + e.name + "' needs bytes [" +
                                  std::to_string(begin) + ", " + std::to_string(begin + e.nbytes) + ") but the file has " +
                                  std::to_string(fsize));
        }
        CheckpointTensor t{e.name, Tensor<float>(e.shape), e.frozen};
        std::vector<uint32_t> raw(static_cast<size_t>(t.data.size()));
        f.seekg(static_cast<std::streamoff>(begin));
        f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(e.nbytes));
        if (!f) {
            throw IoError("failed reading tensor '" + e.name + "' from " + path.string());
        }
        for (size_t i = 0; i < raw.size(); i++) {
            t.data[static_cast<int64_t>(i)] = std::bit_cast<float>(detail::to_le(raw[i]));
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

/// Parameter snapshot of a model; frozen = not trainable.
inline std::vector<CheckpointTensor> snapshot_tensors(const IclModel<float>& model) {
    std::vector<CheckpointTensor> out;
    for (auto& [n, p] : model.parameters()) {
        out.push_back({n, p.value(), !p.requires_grad()});
    }
    return out;
}

/// Copies checkpoint tensors into a model built from the same config. Every model tensor must be
/// present with the same shape, and the checkpoint must not carry extra tensors.
inline void load_tensors(IclModel<float>& model, const Checkpoint& ck) {
    auto params = model.parameters();
    if (params.size() != ck.tensors.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                              std::to_string(params.size()));
    }
    for (auto& [n, p] : params) {
        const CheckpointTensor* t = ck.find(n);
        if (!t) {
            throw CheckpointError("checkpoint is missing tensor '" + n + "'");
        }
        if (t->data.shape != p.shape()) {
            throw CheckpointError("tensor '" + n + "' has shape " + shape_str(t->data.shape) + " but the config implies " +
                                  shape_str(p.shape()));
        }
        p.mutable_value() = t->data;
        p.set_requires_grad(!t->frozen);
    }
}

}  // namespace icl
