#pragma once
// Checkpoint container: a JSON header (config, vocab, adapter setup,
// trainable log-temperature, sampling cursors, tensor directory) followed
// by raw little-endian float32 tensor data. Reload restores bitwise-
// identical forward outputs; optimizer moments ride along so training can
// resume mid-run and reproduce an uninterrupted run exactly.
//
// Layout:  "KALMCKP1" | u32 version | u64 header_len | header JSON | data

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kalign/common.hpp"
#include "kalign/encoder.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

inline constexpr char kCkptMagic[9] = "KALMCKP1";
inline constexpr std::uint32_t kCkptVersion = 1;

// Sampling cursors: together with the run seed these fully determine the
// remaining batch sequence, so they are the RNG state of a run.
struct TrainCursor {
    std::int64_t step = 0;
    std::int32_t epochs_completed = 0;
    std::int64_t explicit_epoch = 0;
    std::int64_t explicit_pos = 0;
    std::int64_t implicit_epoch = 0;
    std::int64_t implicit_pos = 0;
};

struct OptimizerState {
    std::int64_t step = 0;
    std::vector<std::pair<std::string, Mat<float>>> m;
    std::vector<std::pair<std::string, Mat<float>>> v;
};

struct Checkpoint {
    ModelConfig model_config;
    std::optional<AdapterConfig> adapter;
    Vocab vocab;
    std::uint64_t vocab_hash = 0;
    double log_tau = 0.0;
    TrainCursor cursor;
    OptimizerState opt;
    std::map<std::string, std::string> config_snapshot;  // flat train-config keys
    Model<float> model;
};

namespace detail {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_ffn", c.d_ffn},
            {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::int32_t>();
    c.d_model = j.at("d_model").get<std::int32_t>();
    c.n_heads = j.at("n_heads").get<std::int32_t>();
    c.d_ffn = j.at("d_ffn").get<std::int32_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::int32_t>();
    c.vocab_size = j.at("vocab_size").get<std::int32_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline nlohmann::json adapter_to_json(const AdapterConfig& a) {
    return {{"rank", a.rank},
            {"alpha", a.alpha},
            {"dropout", a.dropout},
            {"target", adapter_target_name(a.target)}};
}

inline AdapterConfig adapter_from_json(const nlohmann::json& j) {
    AdapterConfig a;
    a.rank = j.at("rank").get<std::int32_t>();
    a.alpha = j.at("alpha").get<double>();
    a.dropout = j.at("dropout").get<double>();
    a.target = adapter_target_from_name(j.at("target").get<std::string>());
    return a;
}

inline void write_tensor(std::ofstream& out, const Mat<float>& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
}

inline void read_tensor(std::ifstream& in, Mat<float>& m) {
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
    require(in.good(), "checkpoint: truncated tensor data");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, Model<float>& model,
                            const Vocab& vocab, double log_tau, const TrainCursor& cursor,
                            const OptimizerState& opt,
                            const std::map<std::string, std::string>& config_snapshot) {
    nlohmann::json header;
    header["model_config"] = detail::model_config_to_json(model.config());
    if (model.adapters_active())
        header["adapter"] = detail::adapter_to_json(model.adapter_config());
    header["vocab"] = vocab.tokens;
    header["vocab_hash"] = std::to_string(vocab.hash());
    header["log_tau"] = log_tau;
    header["cursor"] = {{"step", cursor.step},
                        {"epochs_completed", cursor.epochs_completed},
                        {"explicit_epoch", cursor.explicit_epoch},
                        {"explicit_pos", cursor.explicit_pos},
                        {"implicit_epoch", cursor.implicit_epoch},
                        {"implicit_pos", cursor.implicit_pos}};
    header["config_snapshot"] = config_snapshot;

    auto params = model.all_params();
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& p : params)
        tensors.push_back({{"name", p.name}, {"rows", p.value->rows()}, {"cols", p.value->cols()}});
    header["tensors"] = tensors;

    header["opt_step"] = opt.step;
    nlohmann::json opt_tensors = nlohmann::json::array();
    for (const auto& [name, m] : opt.m)
        opt_tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    header["opt_tensors"] = opt_tensors;

    std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "save_checkpoint: cannot write " + path.string());
    out.write(kCkptMagic, 8);
    std::uint32_t version = kCkptVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& p : params) detail::write_tensor(out, *p.value);
    for (const auto& [name, m] : opt.m) detail::write_tensor(out, m);
    for (const auto& [name, m] : opt.v) detail::write_tensor(out, m);
    require(out.good(), "save_checkpoint: write failure on " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_checkpoint: cannot read " + path.string());
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::memcmp(magic, kCkptMagic, 8) == 0,
            "load_checkpoint: bad magic in " + path.string());
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    require(version == kCkptVersion, "load_checkpoint: unsupported version");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    require(in.good(), "load_checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(header_str);

    Checkpoint ck;
    ck.model_config = detail::model_config_from_json(header.at("model_config"));
    if (header.contains("adapter")) ck.adapter = detail::adapter_from_json(header.at("adapter"));
    for (const auto& t : header.at("vocab")) ck.vocab.tokens.push_back(t.get<std::string>());
    for (TokenId i = 0; i < ck.vocab.size(); ++i)
        ck.vocab.ids.emplace(ck.vocab.tokens[static_cast<std::size_t>(i)], i);
    ck.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>());
    require(ck.vocab_hash == ck.vocab.hash(), "load_checkpoint: vocab hash mismatch");
    ck.log_tau = header.at("log_tau").get<double>();
    const auto& cur = header.at("cursor");
    ck.cursor.step = cur.at("step").get<std::int64_t>();
    ck.cursor.epochs_completed = cur.at("epochs_completed").get<std::int32_t>();
    ck.cursor.explicit_epoch = cur.at("explicit_epoch").get<std::int64_t>();
    ck.cursor.explicit_pos = cur.at("explicit_pos").get<std::int64_t>();
    ck.cursor.implicit_epoch = cur.at("implicit_epoch").get<std::int64_t>();
    ck.cursor.implicit_pos = cur.at("implicit_pos").get<std::int64_t>();
    if (header.contains("config_snapshot"))
        ck.config_snapshot =
            header.at("config_snapshot").get<std::map<std::string, std::string>>();

    ck.model = Model<float>(ck.model_config);
    if (ck.adapter) ck.model.attach_adapters(*ck.adapter);
    auto params = ck.model.all_params();
    const auto& tensors = header.at("tensors");
    require(tensors.size() == params.size(), "load_checkpoint: tensor directory size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = tensors[i];
        require(e.at("name").get<std::string>() == params[i].name,
                "load_checkpoint: tensor name mismatch at index " + std::to_string(i));
        require(e.at("rows").get<Eigen::Index>() == params[i].value->rows() &&
                    e.at("cols").get<Eigen::Index>() == params[i].value->cols(),
                "load_checkpoint: tensor shape mismatch for " + params[i].name);
        detail::read_tensor(in, *params[i].value);
    }

    ck.opt.step = header.value("opt_step", std::int64_t{0});
    if (header.contains("opt_tensors")) {
        for (const auto& e : header.at("opt_tensors")) {
            Mat<float> m(e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>());
            ck.opt.m.emplace_back(e.at("name").get<std::string>(), std::move(m));
        }
        for (auto& [name, m] : ck.opt.m) detail::read_tensor(in, m);
        for (const auto& e : header.at("opt_tensors")) {
            Mat<float> m(e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>());
            ck.opt.v.emplace_back(e.at("name").get<std::string>(), std::move(m));
        }
        for (auto& [name, m] : ck.opt.v) detail::read_tensor(in, m);
    }
    return ck;
}

}  // namespace kalign
