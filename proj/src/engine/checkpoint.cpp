#include <cstring>
#include <fstream>

#include "ctreason/engine/engine.hpp"
#include "ctreason/errors.hpp"

namespace ctreason::engine {

using nlohmann::json;

namespace {

std::string dtype_name(torch::Dtype d) {
    if (d == torch::kFloat32) return "float32";
    if (d == torch::kFloat64) return "float64";
    throw IoError("checkpoint: unsupported tensor dtype");
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint: truncated header length");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Models& models, const RunConfig& cfg, const json& extra) {
    json tensors = json::array();
    std::vector<torch::Tensor> blobs;
    std::uint64_t offset = 0;
    for (auto& [group, params] : models.groups()) {
        for (auto& [name, t] : params) {
            auto c = t.detach().cpu().contiguous();
            const auto nbytes = static_cast<std::uint64_t>(c.numel() * c.element_size());
            tensors.push_back({{"name", name},
                               {"group", group},
                               {"dtype", dtype_name(c.scalar_type())},
                               {"shape", c.sizes().vec()},
                               {"offset", offset},
                               {"nbytes", nbytes}});
            offset += nbytes;
            blobs.push_back(c);
        }
    }
    RunConfig resolved = cfg;
    resolved.reasoner.vocab_size = models.reasoner_cfg.vocab_size;
    resolved.train.dtype = dtype_name(models.dtype);
    json header = {{"config", json::parse(resolved.to_json().dump())},
                   {"vocab", json::parse(models.vocab->to_json())},
                   {"adapter", nullptr},
                   {"tensors", tensors},
                   {"extra", extra}};
    if (models.adapter)
        header["adapter"] = {{"rank", models.adapter->rank},
                             {"alpha", models.adapter->alpha},
                             {"dropout", models.adapter->dropout}};
    const auto text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write checkpoint " + path.string());
        os.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
        put_u64(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& b : blobs)
            os.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.numel() * b.element_size()));
        if (!os) throw IoError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    const std::size_t mlen = std::strlen(kCheckpointMagic);
    std::string magic(mlen, '\0');
    if (!is.read(magic.data(), static_cast<std::streamsize>(mlen)) || magic != kCheckpointMagic)
        throw IoError("not a ctreason-ckpt-v1 archive: " + path.string());
    const auto hlen = get_u64(is);
    if (hlen > (1ULL << 30)) throw IoError("checkpoint header is implausibly large");
    std::string text(hlen, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(hlen))) throw IoError("checkpoint: truncated header");
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: malformed header: ") + e.what());
    }
    const auto data_start = is.tellg();

    LoadedCheckpoint out{Models{}, config_from_json(header.at("config")), header.value("extra", json::object())};
    const auto vocab = tokenizer::Vocabulary::from_json(header.at("vocab").dump());
    out.models = build_models(out.config, vocab);
    if (!header.at("adapter").is_null()) {
        AdapterConfig a;
        a.rank = header["adapter"].at("rank").get<int>();
        a.alpha = header["adapter"].at("alpha").get<double>();
        a.dropout = header["adapter"].at("dropout").get<double>();
        out.models.attach_adapters(a);
    }

    std::map<std::pair<std::string, std::string>, torch::Tensor> targets;
    for (auto& [group, params] : out.models.groups())
        for (auto& [name, t] : params) targets[{group, name}] = t;

    torch::NoGradGuard no_grad;
    std::size_t loaded = 0;
    for (const auto& entry : header.at("tensors")) {
        const auto key = std::make_pair(entry.at("group").get<std::string>(), entry.at("name").get<std::string>());
        const auto it = targets.find(key);
        if (it == targets.end()) throw IoError("checkpoint tensor " + key.first + "/" + key.second + " is unknown");
        const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        if (it->second.sizes().vec() != shape)
            throw IoError("checkpoint tensor " + key.first + "/" + key.second + " has a mismatched shape");
        const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
        auto buf = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        if (static_cast<std::uint64_t>(buf.numel() * buf.element_size()) != nbytes)
            throw IoError("checkpoint tensor " + key.first + "/" + key.second + " has a wrong byte count");
        is.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        if (!is.read(static_cast<char*>(buf.data_ptr()), static_cast<std::streamsize>(nbytes)))
            throw IoError("checkpoint: truncated tensor data");
        it->second.copy_(buf);
        ++loaded;
    }
    if (loaded != targets.size()) throw IoError("checkpoint is missing parameters");
    return out;
}

}  // namespace ctreason::engine
