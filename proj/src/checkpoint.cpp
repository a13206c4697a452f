#include "kdlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace kdlab {

namespace {
constexpr char kMagic[4] = {'D', 'K', 'T', '1'};

#ifdef KDLAB_USE_FLOAT32
constexpr const char* kDtype = "f32";
#else
constexpr const char* kDtype = "f64";
#endif
} // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
    nlohmann::json manifest;
    manifest["config"] = config;
    manifest["dtype"] = kDtype;
    nlohmann::json entries = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        e["bytes"] = static_cast<uint64_t>(t.size() * sizeof(real_t));
        entries.push_back(e);
        offset += t.size() * sizeof(real_t);
    }
    manifest["tensors"] = entries;
    const std::string mjson = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    kd_check(out.good(), "save_checkpoint: cannot open " + path);
    out.write(kMagic, 4);
    const uint64_t mlen = mjson.size();
    out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(real_t)));
    }
    kd_check(out.good(), "save_checkpoint: write failed for " + path);
}

const Tensor& LoadedCheckpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    kd_check(in.good(), "load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    kd_check(in.good() && std::memcmp(magic, kMagic, 4) == 0,
             "load_checkpoint: bad magic in " + path);
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(mlen));
    kd_check(in.good(), "load_checkpoint: truncated manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(mjson);
    kd_check(manifest.value("dtype", "") == kDtype,
             "load_checkpoint: dtype mismatch (checkpoint " + manifest.value("dtype", "?") +
                 ", build " + kDtype + ")");

    LoadedCheckpoint result;
    result.config = manifest["config"];
    const std::streampos payload_start = in.tellg();
    for (const auto& e : manifest["tensors"]) {
        std::vector<size_t> shape = e["shape"].get<std::vector<size_t>>();
        size_t numel = 1;
        for (size_t d : shape) numel *= d;
        std::vector<real_t> data(numel);
        in.seekg(payload_start + static_cast<std::streamoff>(e["offset"].get<uint64_t>()));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(numel * sizeof(real_t)));
        kd_check(in.good(), "load_checkpoint: truncated blob for " + e["name"].get<std::string>());
        result.tensors.emplace_back(e["name"].get<std::string>(),
                                    Tensor::from(std::move(data), std::move(shape)));
    }
    return result;
}

} // namespace kdlab
