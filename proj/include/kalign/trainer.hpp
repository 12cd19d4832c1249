#pragma once
// Training loop for the joint objective: every optimizer step draws an
// explicit batch of N description pairs and an implicit batch of M
// instruction samples from independently shuffled cursors over the
// augmented train split, computes L_exp + lambda * L_imp, and applies one
// AdamW step over all trainable tensors including the log-temperature.
//
// Determinism contract: all sampling derives from (seed, stream, epoch)
// so a fixed seed reproduces the loss log bitwise, and a checkpoint's
// cursor state resumes a run exactly.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kalign/alignment_losses.hpp"
#include "kalign/checkpoint.hpp"
#include "kalign/common.hpp"
#include "kalign/diagnostics.hpp"
#include "kalign/encoder.hpp"
#include "kalign/kg_store.hpp"
#include "kalign/kgc_eval.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

struct TrainConfig {
    std::string dataset_dir;
    std::string run_dir;

    // Table-style hyperparameters (config keys mirror these names)
    std::int32_t epochs = 20;
    std::int32_t max_description_length = 50;
    std::int32_t max_language_modeling_length = 256;
    std::int32_t explicit_batch_size = 24;  // N
    std::int32_t implicit_batch_size = 4;   // M
    std::string lora_module = "none";       // none | ffn | att | att-ffn
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    std::int32_t lora_rank = 8;
    std::string bnb_config = "none";  // quantized loading is out of scope; key accepted
    double learning_rate = 1e-4;
    std::string lr_scheduler_type = "cosine";  // cosine | constant
    double weight_decay = 0.001;
    bool gradient_checkpointing = false;
    std::string optimizer = "AdamW";
    double adamw_beta1 = 0.9;
    double adamw_beta2 = 0.999;
    bool bf16 = false;  // accepted for config compatibility; arithmetic stays fp32

    // objective
    double lambda = 0.1;
    double tau_init = 0.05;
    double margin = 0.02;

    // desk-scale model
    std::int32_t n_layers = 4;
    std::int32_t d_model = 128;
    std::int32_t n_heads = 4;
    std::int32_t ffn_dim = 512;
    std::int32_t vocab_max_size = 8192;
    std::uint64_t seed = 0;

    // run control
    std::string probe_path;                  // optional probe corpus for per-epoch anisotropy
    std::int32_t valid_eval_queries = 200;   // per-epoch valid KGC cap; 0 disables, -1 = all
    std::int32_t checkpoint_every = 1;       // epochs
    std::int64_t stop_after_steps = 0;       // 0 = run to completion (used by the resume harness)

    void validate() const {
        require(!dataset_dir.empty(), "TrainConfig: dataset-dir is required");
        require(epochs >= 1, "TrainConfig: epochs must be >= 1");
        require(explicit_batch_size >= 2,
                "TrainConfig: explicit-alignment-batch-size must be >= 2 (contrastive needs a negative)");
        require(implicit_batch_size >= 1, "TrainConfig: implicit-alignment-batch-size must be >= 1");
        require(std::isfinite(lambda) && lambda >= 0.0, "TrainConfig: lambda must be finite and >= 0");
        require(margin >= 0.0, "TrainConfig: margin must be >= 0");
        require(tau_init > 0.0, "TrainConfig: tau-init must be positive");
        require(learning_rate > 0.0, "TrainConfig: learning-rate must be positive");
        require(lr_scheduler_type == "cosine" || lr_scheduler_type == "constant",
                "TrainConfig: LR-scheduler-type must be cosine or constant");
        require(optimizer == "AdamW", "TrainConfig: only the AdamW optimizer is supported");
        require(lora_module == "none" || lora_module == "ffn" || lora_module == "att" ||
                    lora_module == "att-ffn",
                "TrainConfig: lora-module must be none, ffn, att, or att-ffn");
    }
};

// --- flat key-value config file -----------------------------------------

namespace cfgfile {

// `key value` or `key = value`, one per line, '#' comments. The historical
// spellings "lora-drouout" and "LR-sheduler-type" are accepted as aliases.
inline std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot read " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        std::size_t sep = t.find_first_of("= \t");
        require(sep != std::string::npos, "config: line " + std::to_string(lineno) +
                                              " has no value: " + t);
        std::string key = trim(t.substr(0, sep));
        std::string value = trim(t.substr(sep + 1));
        if (!value.empty() && value.front() == '=') value = trim(value.substr(1));
        require(!key.empty() && !value.empty(),
                "config: line " + std::to_string(lineno) + " is malformed");
        kv[key] = value;
    }
    return kv;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    std::string s = lowercase(v);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace cfgfile

inline TrainConfig train_config_from_map(std::map<std::string, std::string> kv) {
    TrainConfig c;
    auto take = [&kv](std::initializer_list<const char*> names) -> std::optional<std::string> {
        for (const char* n : names) {
            auto it = kv.find(n);
            if (it != kv.end()) {
                std::string v = it->second;
                kv.erase(it);
                return v;
            }
        }
        return std::nullopt;
    };
    auto as_i32 = [](const std::string& v) { return static_cast<std::int32_t>(std::stol(v)); };
    auto as_i64 = [](const std::string& v) { return static_cast<std::int64_t>(std::stoll(v)); };

    if (auto v = take({"dataset-dir"})) c.dataset_dir = *v;
    if (auto v = take({"run-dir"})) c.run_dir = *v;
    if (auto v = take({"epochs"})) c.epochs = as_i32(*v);
    if (auto v = take({"max-description-length"})) c.max_description_length = as_i32(*v);
    if (auto v = take({"max-language-modeling-length"})) c.max_language_modeling_length = as_i32(*v);
    if (auto v = take({"explicit-alignment-batch-size"})) c.explicit_batch_size = as_i32(*v);
    if (auto v = take({"implicit-alignment-batch-size"})) c.implicit_batch_size = as_i32(*v);
    if (auto v = take({"lora-module"})) c.lora_module = *v;
    if (auto v = take({"lora-alpha"})) c.lora_alpha = std::stod(*v);
    if (auto v = take({"lora-dropout", "lora-drouout"})) c.lora_dropout = std::stod(*v);
    if (auto v = take({"lora-rank"})) c.lora_rank = as_i32(*v);
    if (auto v = take({"bnb-config"})) c.bnb_config = *v;
    if (auto v = take({"learning-rate"})) c.learning_rate = std::stod(*v);
    if (auto v = take({"LR-scheduler-type", "LR-sheduler-type"})) c.lr_scheduler_type = *v;
    if (auto v = take({"weight-decay"})) c.weight_decay = std::stod(*v);
    if (auto v = take({"gradient-checkpointing"}))
        c.gradient_checkpointing = cfgfile::parse_bool(*v, "gradient-checkpointing");
    if (auto v = take({"optimizer"})) c.optimizer = *v;
    if (auto v = take({"AdamW-beta1"})) c.adamw_beta1 = std::stod(*v);
    if (auto v = take({"AdamW-beta2"})) c.adamw_beta2 = std::stod(*v);
    if (auto v = take({"bf16"})) c.bf16 = cfgfile::parse_bool(*v, "bf16");
    if (auto v = take({"lambda"})) c.lambda = std::stod(*v);
    if (auto v = take({"tau-init"})) c.tau_init = std::stod(*v);
    if (auto v = take({"margin"})) c.margin = std::stod(*v);
    if (auto v = take({"n-layers"})) c.n_layers = as_i32(*v);
    if (auto v = take({"d-model"})) c.d_model = as_i32(*v);
    if (auto v = take({"n-heads"})) c.n_heads = as_i32(*v);
    if (auto v = take({"ffn-dim"})) c.ffn_dim = as_i32(*v);
    if (auto v = take({"vocab-max-size"})) c.vocab_max_size = as_i32(*v);
    if (auto v = take({"seed"})) c.seed = static_cast<std::uint64_t>(std::stoull(*v));
    if (auto v = take({"probe-path"})) c.probe_path = *v;
    if (auto v = take({"valid-eval-queries"})) c.valid_eval_queries = as_i32(*v);
    if (auto v = take({"checkpoint-every"})) c.checkpoint_every = as_i32(*v);
    if (auto v = take({"stop-after-steps"})) c.stop_after_steps = as_i64(*v);

    require(kv.empty(), "config: unknown key '" + (kv.empty() ? "" : kv.begin()->first) + "'");
    require(c.bnb_config == "none",
            "config: bnb-config '" + c.bnb_config + "' is not supported; quantized loading is out of scope");
    c.validate();
    return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    return train_config_from_map(cfgfile::parse_kv_file(path));
}

inline std::map<std::string, std::string> train_config_to_map(const TrainConfig& c) {
    std::map<std::string, std::string> kv;
    auto num = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    kv["dataset-dir"] = c.dataset_dir;
    kv["run-dir"] = c.run_dir;
    kv["epochs"] = std::to_string(c.epochs);
    kv["max-description-length"] = std::to_string(c.max_description_length);
    kv["max-language-modeling-length"] = std::to_string(c.max_language_modeling_length);
    kv["explicit-alignment-batch-size"] = std::to_string(c.explicit_batch_size);
    kv["implicit-alignment-batch-size"] = std::to_string(c.implicit_batch_size);
    kv["lora-module"] = c.lora_module;
    kv["lora-alpha"] = num(c.lora_alpha);
    kv["lora-dropout"] = num(c.lora_dropout);
    kv["lora-rank"] = std::to_string(c.lora_rank);
    kv["bnb-config"] = c.bnb_config;
    kv["learning-rate"] = num(c.learning_rate);
    kv["LR-scheduler-type"] = c.lr_scheduler_type;
    kv["weight-decay"] = num(c.weight_decay);
    kv["gradient-checkpointing"] = c.gradient_checkpointing ? "True" : "False";
    kv["optimizer"] = c.optimizer;
    kv["AdamW-beta1"] = num(c.adamw_beta1);
    kv["AdamW-beta2"] = num(c.adamw_beta2);
    kv["bf16"] = c.bf16 ? "True" : "False";
    kv["lambda"] = num(c.lambda);
    kv["tau-init"] = num(c.tau_init);
    kv["margin"] = num(c.margin);
    kv["n-layers"] = std::to_string(c.n_layers);
    kv["d-model"] = std::to_string(c.d_model);
    kv["n-heads"] = std::to_string(c.n_heads);
    kv["ffn-dim"] = std::to_string(c.ffn_dim);
    kv["vocab-max-size"] = std::to_string(c.vocab_max_size);
    kv["seed"] = std::to_string(c.seed);
    kv["probe-path"] = c.probe_path;
    kv["valid-eval-queries"] = std::to_string(c.valid_eval_queries);
    kv["checkpoint-every"] = std::to_string(c.checkpoint_every);
    return kv;
}

// --- optimizer ------------------------------------------------------------

// Decoupled-weight-decay adaptive moments over an explicit parameter list.
template <typename S>
class AdamW {
public:
    AdamW(std::vector<ParamRef<S>> params, double beta1, double beta2, double weight_decay,
          double eps = 1e-8)
        : params_(std::move(params)), b1_(S(beta1)), b2_(S(beta2)), wd_(S(weight_decay)), eps_(S(eps)) {
        for (auto& p : params_) {
            m_.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
            v_.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
        }
    }

    void step(S lr) {
        ++t_;
        const S bc1 = S(1) - std::pow(b1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(b2_, static_cast<S>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Mat<S>& w = *params_[i].value;
            const Mat<S>& g = *params_[i].grad;
            Mat<S>& m = m_[i];
            Mat<S>& v = v_[i];
            m = b1_ * m + (S(1) - b1_) * g;
            v = b2_ * v + (S(1) - b2_) * g.cwiseProduct(g);
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) {
                    S mhat = m(r, c) / bc1;
                    S vhat = v(r, c) / bc2;
                    w(r, c) -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w(r, c));
                }
        }
    }

    std::int64_t step_count() const { return t_; }

    OptimizerState state() const {
        OptimizerState s;
        s.step = t_;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            s.m.emplace_back(params_[i].name, m_[i].template cast<float>());
            s.v.emplace_back(params_[i].name, v_[i].template cast<float>());
        }
        return s;
    }

    void restore(const OptimizerState& s) {
        require(s.m.size() == params_.size() && s.v.size() == params_.size(),
                "optimizer restore: state tensor count mismatch");
        t_ = s.step;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            require(s.m[i].first == params_[i].name, "optimizer restore: tensor name mismatch");
            m_[i] = s.m[i].second.template cast<S>();
            v_[i] = s.v[i].second.template cast<S>();
        }
    }

private:
    std::vector<ParamRef<S>> params_;
    std::vector<Mat<S>> m_, v_;
    S b1_, b2_, wd_, eps_;
    std::int64_t t_ = 0;
};

// LR(0) = lr, LR(last) = 0 under cosine.
inline double lr_at_step(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
    if (cfg.lr_scheduler_type == "constant" || total_steps <= 1) return cfg.learning_rate;
    double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// --- metrics ---------------------------------------------------------------

struct StepRecord {
    std::int64_t step = 0;
    std::int32_t epoch = 0;
    float l_exp = 0, l_imp = 0, l_joint = 0, tau = 0;
    double lr = 0;
};

struct EpochRecord {
    std::int32_t epoch = 0;
    std::optional<KgcMetrics> valid;
    std::optional<double> probe_anisotropy;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::int64_t samples_explicit = 0;
    std::int64_t samples_implicit = 0;
    std::int64_t train_forward_count = 0;  // forwards consumed by optimization only
    Vocab vocab;
    double log_tau = 0.0;
};

namespace detail {

inline nlohmann::json step_to_json(const StepRecord& r) {
    return {{"step", r.step},       {"epoch", r.epoch}, {"L_exp", r.l_exp},
            {"L_imp", r.l_imp},     {"L_joint", r.l_joint}, {"tau", r.tau},
            {"lr", r.lr}};
}

}  // namespace detail

// --- perplexity --------------------------------------------------------------

// exp(mean token NLL) of the causal LM over plain-text lines.
template <typename S>
double toy_perplexity(const Model<S>& model, const Vocab& vocab,
                      const std::vector<std::string>& lines, std::int32_t max_len) {
    require(!lines.empty(), "toy_perplexity: empty corpus");
    KahanSum nll;
    std::int64_t n_tokens = 0;
    for (const auto& line : lines) {
        TokenSeq toks = tokenize(line, vocab);
        if (static_cast<std::int32_t>(toks.size()) > max_len)
            toks.resize(static_cast<std::size_t>(max_len));
        if (toks.size() < 2) continue;
        ForwardTrace<S> tr = model.forward(toks);
        Mat<S> lg = model.logits(tr.xf);
        for (std::size_t p = 1; p < toks.size(); ++p) {
            const auto row = lg.row(static_cast<Eigen::Index>(p - 1));
            double mx = static_cast<double>(row.maxCoeff());
            KahanSum denom;
            for (Eigen::Index v = 0; v < row.size(); ++v)
                denom.add(std::exp(static_cast<double>(row(v)) - mx));
            nll.add(mx + std::log(denom.value()) - static_cast<double>(row(toks[p])));
            ++n_tokens;
        }
    }
    require(n_tokens > 0, "toy_perplexity: corpus has no scorable tokens");
    return std::exp(nll.value() / static_cast<double>(n_tokens));
}

// --- trainer -----------------------------------------------------------------

// The corpus the training vocabulary is built from: pair texts plus the
// fully rendered instruction text so template words survive the frequency
// cut.
inline std::vector<std::string> training_vocab_corpus(const std::vector<KnowledgePair>& pairs) {
    std::vector<std::string> corpus;
    corpus.reserve(pairs.size() * 3);
    for (const auto& p : pairs) {
        corpus.push_back(p.hr_text);
        corpus.push_back(p.t_text);
        corpus.push_back(render_prompt_text(templates::kTripleCompletionInstruction, p.hr_text) +
                         p.t_text);
    }
    return corpus;
}

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

    // Fresh run.
    TrainResult run() { return run_impl(nullptr); }

    // Continue from a checkpoint; structural settings must match, tuning
    // knobs may differ (logged as config deltas).
    TrainResult run(const Checkpoint& resume_from) { return run_impl(&resume_from); }

    // Per-epoch sampling order, exposed for the determinism harnesses.
    static std::vector<std::int64_t> epoch_permutation(std::uint64_t seed, const char* stream,
                                                       std::int64_t epoch, std::int64_t n) {
        std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
        Rng rng(derive_seed(seed, stream, static_cast<std::uint64_t>(epoch)));
        shuffle_deterministic(perm, rng);
        return perm;
    }

private:
    TrainResult run_impl(const Checkpoint* resume_from) {
        namespace fs = std::filesystem;
        KnowledgeGraph kg = augment_inverse(load_kg(cfg_.dataset_dir));
        std::vector<KnowledgePair> pairs = make_pairs(kg.split(Split::Train), kg);
        const std::int64_t n_pairs = static_cast<std::int64_t>(pairs.size());
        require(n_pairs >= cfg_.explicit_batch_size,
                "train: fewer train pairs than the explicit batch size");

        Vocab vocab = build_vocab(training_vocab_corpus(pairs), cfg_.vocab_max_size);

        ModelConfig mc;
        mc.n_layers = cfg_.n_layers;
        mc.d_model = cfg_.d_model;
        mc.n_heads = cfg_.n_heads;
        mc.d_ffn = cfg_.ffn_dim;
        mc.max_seq_len = cfg_.max_language_modeling_length;
        mc.vocab_size = vocab.size();
        mc.seed = cfg_.seed;

        Model<float> model;
        Mat<float> log_tau(1, 1), log_tau_g(1, 1);
        TrainCursor cursor;

        if (resume_from != nullptr) {
            const Checkpoint& ck = *resume_from;
            require(ck.vocab_hash == vocab.hash(),
                    "resume: vocab hash mismatch between checkpoint and dataset");
            require(ck.model_config == mc, "resume: model configuration mismatch");
            for (const char* structural :
                 {"explicit-alignment-batch-size", "implicit-alignment-batch-size", "seed",
                  "lora-module"}) {
                auto mine = train_config_to_map(cfg_);
                auto it = ck.config_snapshot.find(structural);
                require(it == ck.config_snapshot.end() || it->second == mine[structural],
                        std::string("resume: structural config key '") + structural +
                            "' differs from checkpoint");
            }
            model = ck.model;
            log_tau(0, 0) = static_cast<float>(ck.log_tau);
            cursor = ck.cursor;
        } else {
            model = Model<float>(mc);
            if (cfg_.lora_module != "none") {
                AdapterConfig ac;
                ac.rank = cfg_.lora_rank;
                ac.alpha = cfg_.lora_alpha;
                ac.dropout = cfg_.lora_dropout;
                ac.target = adapter_target_from_name(cfg_.lora_module);
                model.attach_adapters(ac);
            }
            log_tau(0, 0) = static_cast<float>(std::log(cfg_.tau_init));
        }
        log_tau_g.setZero();

        auto params = model.trainable_params();
        params.push_back({"log_tau", &log_tau, &log_tau_g});
        AdamW<float> opt(params, cfg_.adamw_beta1, cfg_.adamw_beta2, cfg_.weight_decay);
        if (resume_from != nullptr) opt.restore(resume_from->opt);

        const std::int64_t steps_per_epoch = n_pairs / cfg_.explicit_batch_size;
        require(steps_per_epoch >= 1, "train: explicit batch larger than the pair corpus");
        const std::int64_t total_steps = steps_per_epoch * cfg_.epochs;

        std::optional<std::ofstream> metrics_out;
        if (!cfg_.run_dir.empty()) {
            fs::create_directories(cfg_.run_dir);
            save_vocab(vocab, fs::path(cfg_.run_dir) / "vocab.txt");
            metrics_out.emplace(fs::path(cfg_.run_dir) / "metrics.jsonl",
                                resume_from ? std::ios::app : std::ios::trunc);
            require(metrics_out->good(), "train: cannot open metrics log in " + cfg_.run_dir);
        }
        auto emit = [&metrics_out](const nlohmann::json& j) {
            if (metrics_out) {
                (*metrics_out) << j.dump() << "\n";
                metrics_out->flush();
            }
        };

        if (resume_from != nullptr) {
            // Surface tuning-knob deltas relative to the checkpointed run.
            auto mine = train_config_to_map(cfg_);
            for (const auto& [k, v] : mine) {
                auto it = resume_from->config_snapshot.find(k);
                if (it != resume_from->config_snapshot.end() && it->second != v)
                    emit({{"event", "config_delta"}, {"key", k}, {"from", it->second}, {"to", v}});
            }
        }

        std::vector<std::string> probe_lines;
        if (!cfg_.probe_path.empty()) {
            std::ifstream probe(cfg_.probe_path);
            require(probe.good(), "train: cannot read probe corpus " + cfg_.probe_path);
            std::string line;
            while (std::getline(probe, line))
                if (!trim(line).empty()) probe_lines.push_back(line);
            require(probe_lines.size() >= 2, "train: probe corpus needs at least 2 lines");
        }

        TrainResult result;
        result.vocab = vocab;
        const std::int64_t fwd_at_start = model.forward_count();
        eval_forwards_ = 0;

        std::int64_t exp_perm_epoch = cursor.explicit_epoch;
        std::vector<std::int64_t> exp_perm =
            epoch_permutation(cfg_.seed, "exp_shuffle", exp_perm_epoch, n_pairs);
        std::vector<std::int64_t> imp_perm =
            epoch_permutation(cfg_.seed, "imp_shuffle", cursor.implicit_epoch, n_pairs);

        const auto N = cfg_.explicit_batch_size;
        bool stopped_early = false;

        for (std::int32_t epoch = cursor.epochs_completed; epoch < cfg_.epochs && !stopped_early;
             ++epoch) {
            cursor.explicit_epoch = epoch;
            if (exp_perm_epoch != cursor.explicit_epoch) {
                exp_perm_epoch = cursor.explicit_epoch;
                exp_perm = epoch_permutation(cfg_.seed, "exp_shuffle", exp_perm_epoch, n_pairs);
            }
            while (cursor.explicit_pos + N <= n_pairs) {
                run_step(model, opt, log_tau, log_tau_g, pairs, vocab, exp_perm, imp_perm, cursor,
                         n_pairs, total_steps, epoch, result, emit);
                if (cfg_.stop_after_steps > 0 && cursor.step >= cfg_.stop_after_steps) {
                    stopped_early = true;
                    break;
                }
            }
            if (stopped_early) break;

            cursor.epochs_completed = epoch + 1;
            cursor.explicit_epoch = epoch + 1;
            cursor.explicit_pos = 0;

            EpochRecord er;
            er.epoch = epoch + 1;
            nlohmann::json je{{"event", "epoch"}, {"epoch", epoch + 1}};
            const std::int64_t fwd_before_eval = model.forward_count();
            if (cfg_.valid_eval_queries != 0) {
                KgcEvalOptions eo;
                eo.max_desc_len = cfg_.max_description_length;
                eo.max_queries = cfg_.valid_eval_queries < 0 ? 0 : cfg_.valid_eval_queries;
                KgcMetrics vm = evaluate_kgc(kg, model, vocab, Split::Valid, eo);
                er.valid = vm;
                je["valid_mr"] = vm.mr;
                je["valid_mrr"] = vm.mrr;
                je["valid_hits1"] = vm.hits1;
                je["valid_hits3"] = vm.hits3;
                je["valid_hits10"] = vm.hits10;
            }
            if (!probe_lines.empty()) {
                MatD emb = embed_batch(model, vocab, probe_lines, View::T,
                                       cfg_.max_description_length);
                er.probe_anisotropy = anisotropy(emb);
                je["probe_anisotropy"] = *er.probe_anisotropy;
            }
            eval_forwards_ += model.forward_count() - fwd_before_eval;
            result.epochs.push_back(er);
            emit(je);

            if (!cfg_.run_dir.empty() && cfg_.checkpoint_every > 0 &&
                ((epoch + 1) % cfg_.checkpoint_every == 0 || epoch + 1 == cfg_.epochs)) {
                fs::path p = fs::path(cfg_.run_dir) /
                             ("ckpt_epoch_" + std::to_string(epoch + 1) + ".kalm");
                save_checkpoint(p, model, vocab, static_cast<double>(log_tau(0, 0)), cursor,
                                opt.state(), train_config_to_map(cfg_));
            }
        }

        result.train_forward_count = model.forward_count() - fwd_at_start -
                                     eval_forwards_;  // optimization-only forwards
        result.log_tau = static_cast<double>(log_tau(0, 0));
        if (!cfg_.run_dir.empty()) {
            fs::path p = fs::path(cfg_.run_dir) / "ckpt_final.kalm";
            save_checkpoint(p, model, vocab, static_cast<double>(log_tau(0, 0)), cursor, opt.state(),
                            train_config_to_map(cfg_));
            result.final_checkpoint = p;
        }
        return result;
    }

    template <typename Emit>
    void run_step(Model<float>& model, AdamW<float>& opt, Mat<float>& log_tau, Mat<float>& log_tau_g,
                  const std::vector<KnowledgePair>& pairs, const Vocab& vocab,
                  std::vector<std::int64_t>& exp_perm, std::vector<std::int64_t>& imp_perm,
                  TrainCursor& cursor, std::int64_t n_pairs, std::int64_t total_steps,
                  std::int32_t epoch, TrainResult& result, Emit&& emit) {
        const auto N = cfg_.explicit_batch_size;
        const auto M = cfg_.implicit_batch_size;
        const std::int32_t d = model.config().d_model;

        // --- draw batches ---------------------------------------------
        std::vector<std::int64_t> exp_idx(static_cast<std::size_t>(N));
        for (std::int32_t i = 0; i < N; ++i)
            exp_idx[static_cast<std::size_t>(i)] =
                exp_perm[static_cast<std::size_t>(cursor.explicit_pos + i)];
        cursor.explicit_pos += N;

        std::vector<std::int64_t> imp_idx(static_cast<std::size_t>(M));
        for (std::int32_t j = 0; j < M; ++j) {
            if (cursor.implicit_pos >= n_pairs) {
                ++cursor.implicit_epoch;
                cursor.implicit_pos = 0;
                imp_perm = epoch_permutation(cfg_.seed, "imp_shuffle", cursor.implicit_epoch, n_pairs);
            }
            imp_idx[static_cast<std::size_t>(j)] =
                imp_perm[static_cast<std::size_t>(cursor.implicit_pos++)];
        }

        const float tau = std::exp(log_tau(0, 0));
        const float margin = static_cast<float>(cfg_.margin);
        const bool gc = cfg_.gradient_checkpointing;

        auto drop_rng_for = [this, &cursor](std::int64_t seq_id) {
            return Rng(derive_seed(cfg_.seed, "dropout",
                                   (static_cast<std::uint64_t>(cursor.step) << 24) ^
                                       static_cast<std::uint64_t>(seq_id)));
        };

        // --- explicit forward ------------------------------------------
        std::vector<TokenSeq> view_tokens(static_cast<std::size_t>(2 * N));
        std::vector<ForwardTrace<float>> traces;
        if (!gc) traces.resize(static_cast<std::size_t>(2 * N));
        Mat<float> e_hr(N, d), e_t(N, d);
        Mat<float> raw_hr(N, d), raw_t(N, d);
        for (std::int32_t i = 0; i < N; ++i) {
            const auto& p = pairs[static_cast<std::size_t>(exp_idx[static_cast<std::size_t>(i)])];
            view_tokens[static_cast<std::size_t>(2 * i)] =
                encode_view(p.hr_text, View::HR, vocab, cfg_.max_description_length);
            view_tokens[static_cast<std::size_t>(2 * i + 1)] =
                encode_view(p.t_text, View::T, vocab, cfg_.max_description_length);
            for (int side = 0; side < 2; ++side) {
                std::int64_t sid = 2 * i + side;
                Rng dr = drop_rng_for(sid);
                ForwardTrace<float> tr =
                    model.forward(view_tokens[static_cast<std::size_t>(sid)], true, &dr);
                Row<float> raw = tr.xf.row(tr.xf.rows() - 1);
                float nrm = raw.norm();
                require(nrm > 0, "train: zero-norm view embedding");
                if (side == 0) {
                    raw_hr.row(i) = raw;
                    e_hr.row(i) = raw / nrm;
                } else {
                    raw_t.row(i) = raw;
                    e_t.row(i) = raw / nrm;
                }
                if (!gc) traces[static_cast<std::size_t>(sid)] = std::move(tr);
            }
        }

        Mat<float> sim = similarity_matrix(e_hr, e_t);
        ExplicitLossResult<float> exp_res = explicit_loss_with_grad(sim, margin, tau);

        // --- implicit forward -------------------------------------------
        std::vector<InstructionSample> imp_samples;
        std::vector<ForwardTrace<float>> imp_traces;
        std::vector<Mat<float>> imp_logits;
        for (std::int32_t j = 0; j < M; ++j) {
            const auto& p = pairs[static_cast<std::size_t>(imp_idx[static_cast<std::size_t>(j)])];
            imp_samples.push_back(render_instruction(p, vocab, cfg_.max_description_length,
                                                     cfg_.max_language_modeling_length));
            std::int64_t sid = 2 * N + j;
            Rng dr = drop_rng_for(sid);
            ForwardTrace<float> tr = model.forward(imp_samples.back().full(), true, &dr);
            imp_logits.push_back(model.logits(tr.xf));
            if (!gc) imp_traces.push_back(std::move(tr));
        }
        const bool want_imp_grad = cfg_.lambda > 0.0;
        ImplicitLossResult<float> imp_res =
            implicit_loss_with_grad(imp_logits, imp_samples, want_imp_grad);

        const float l_joint = exp_res.loss + static_cast<float>(cfg_.lambda) * imp_res.loss;
        if (!std::isfinite(l_joint)) {
            std::string dump = "train: non-finite loss at step " + std::to_string(cursor.step) +
                               "; explicit batch pair indices:";
            for (auto i : exp_idx) dump += " " + std::to_string(i);
            dump += "; implicit batch pair indices:";
            for (auto i : imp_idx) dump += " " + std::to_string(i);
            fail(dump);
        }

        // --- backward -----------------------------------------------------
        model.zero_grads();
        log_tau_g.setZero();
        log_tau_g(0, 0) = exp_res.d_log_tau;

        Mat<float> d_e_hr, d_e_t;
        similarity_backward(exp_res.d_sim, e_hr, e_t, d_e_hr, d_e_t);
        for (std::int32_t i = 0; i < N; ++i) {
            for (int side = 0; side < 2; ++side) {
                std::int64_t sid = 2 * i + side;
                const Row<float> raw = side == 0 ? Row<float>(raw_hr.row(i)) : Row<float>(raw_t.row(i));
                const Row<float> dunit =
                    side == 0 ? Row<float>(d_e_hr.row(i)) : Row<float>(d_e_t.row(i));
                Row<float> draw = normalize_backward(raw, dunit);
                const ForwardTrace<float>* tr;
                ForwardTrace<float> recomputed;
                if (gc) {
                    Rng dr = drop_rng_for(sid);
                    recomputed = model.forward(view_tokens[static_cast<std::size_t>(sid)], true, &dr);
                    tr = &recomputed;
                } else {
                    tr = &traces[static_cast<std::size_t>(sid)];
                }
                Mat<float> dxf = Mat<float>::Zero(tr->xf.rows(), d);
                dxf.row(dxf.rows() - 1) = draw;
                model.backward(*tr, dxf);
            }
        }
        if (want_imp_grad) {
            for (std::int32_t j = 0; j < M; ++j) {
                Mat<float> dl = static_cast<float>(cfg_.lambda) *
                                imp_res.d_logits[static_cast<std::size_t>(j)];
                if (gc) {
                    Rng dr = drop_rng_for(2 * N + j);
                    ForwardTrace<float> tr = model.forward(imp_samples[static_cast<std::size_t>(j)].full(),
                                                           true, &dr);
                    model.lm_backward(tr, dl);
                } else {
                    model.lm_backward(imp_traces[static_cast<std::size_t>(j)], dl);
                }
            }
        }

        const double lr = lr_at_step(cfg_, cursor.step, total_steps);
        opt.step(static_cast<float>(lr));

        StepRecord rec;
        rec.step = cursor.step;
        rec.epoch = epoch;
        rec.l_exp = exp_res.loss;
        rec.l_imp = imp_res.loss;
        rec.l_joint = l_joint;
        rec.tau = tau;
        rec.lr = lr;
        result.steps.push_back(rec);
        result.samples_explicit += N;
        result.samples_implicit += M;
        emit(detail::step_to_json(rec));

        ++cursor.step;
    }

    TrainConfig cfg_;
    std::int64_t eval_forwards_ = 0;
};

inline TrainResult train(const TrainConfig& cfg) { return Trainer(cfg).run(); }

inline TrainResult resume(const Checkpoint& ck, const TrainConfig& cfg) {
    return Trainer(cfg).run(ck);
}

}  // namespace kalign
