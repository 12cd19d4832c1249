#pragma once
// Generation-based KGQA: four templated sub-tasks (head / tail / relation
// prediction and triple classification), greedy decoding against the
// response-terminal marker, and normalized exact-match scoring.

#include <cstdint>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/encoder.hpp"
#include "kalign/kg_store.hpp"
#include "kalign/templates.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

enum class QaTask { HeadPrediction, TailPrediction, RelationPrediction, TripleClassification };

inline const char* qa_task_name(QaTask t) {
    switch (t) {
        case QaTask::HeadPrediction: return "head_prediction";
        case QaTask::TailPrediction: return "tail_prediction";
        case QaTask::RelationPrediction: return "relation_prediction";
        default: return "triple_classification";
    }
}

struct QaSample {
    QaTask task = QaTask::TailPrediction;
    std::string prompt;
    std::string gold;
    std::vector<Triple> exemplars;  // validation triples used as few-shot examples
    Triple query;                   // the scored triple (possibly corrupted for classification)
};

namespace detail {

// Prompts interpolate display names. Head prediction phrases the query
// through the inverse relation over the augmented graph.
struct QaTemplate {
    std::string instruction;
    std::string input;
    std::string answer;
};

inline std::string relation_list(const KnowledgeGraph& kg) {
    std::string out;
    for (RelationId r = 0; r < kg.n_original_relations; ++r) {
        if (r > 0) out += "|";
        out += strip_markers(kg.relations[static_cast<std::size_t>(r)].name);
    }
    return out;
}

inline QaTemplate qa_fill(QaTask task, const Triple& t, const KnowledgeGraph& kg,
                          bool classification_positive) {
    // Interpolated names are marker-stripped so the only marker character in
    // a composed prompt is the response terminator inserted by build_prompt.
    std::string head = strip_markers(kg.entities[static_cast<std::size_t>(t.head)].name);
    std::string tail = strip_markers(kg.entities[static_cast<std::size_t>(t.tail)].name);
    std::string rel = strip_markers(kg.relations[static_cast<std::size_t>(t.relation)].name);
    QaTemplate out;
    switch (task) {
        case QaTask::TailPrediction:
            out.instruction = templates::kTripleCompletionInstruction;
            out.input = head + " " + rel;
            out.answer = tail;
            break;
        case QaTask::HeadPrediction: {
            require(kg.inverse_augmented, "build_prompt: head prediction needs an augmented graph");
            const std::string& inv =
                kg.relations[static_cast<std::size_t>(kg.inverse_of(t.relation))].name;
            out.instruction = templates::kTripleCompletionInstruction;
            out.input = tail + " " + inv;
            out.answer = head;
            break;
        }
        case QaTask::RelationPrediction:
            out.instruction = std::string(templates::kRelationPredictionInstruction) + relation_list(kg);
            out.input = head + " " + tail;
            out.answer = rel;
            break;
        case QaTask::TripleClassification:
            out.instruction = templates::kTripleClassificationInstruction;
            out.input = head + " " + rel + " " + tail;
            out.answer = classification_positive ? "yes" : "no";
            break;
    }
    return out;
}

}  // namespace detail

// One prompt for one query triple. k_shots exemplars are drawn from the
// validation split (seeded) and rendered as completed template instances
// ahead of the query instance.
inline QaSample build_prompt(QaTask task, const Triple& triple, const KnowledgeGraph& kg,
                             std::int32_t k_shots, std::uint64_t seed,
                             bool classification_positive = true) {
    const auto& valid = kg.split(Split::Valid);
    require(k_shots >= 0 && static_cast<std::size_t>(k_shots) <= valid.size(),
            "build_prompt: k_shots exceeds validation split size");

    QaSample s;
    s.task = task;
    s.query = triple;

    Rng rng(derive_seed(seed, "qa_shots"));
    std::vector<std::size_t> idx(valid.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle_deterministic(idx, rng);

    std::string prompt;
    std::int32_t used = 0;
    for (std::size_t i = 0; i < idx.size() && used < k_shots; ++i) {
        const Triple& ex = valid[idx[i]];
        if (ex == triple) continue;  // never leak the query itself
        bool positive = task != QaTask::TripleClassification || (used % 2 == 0);
        Triple shown = ex;
        if (!positive) {
            // corrupt the exemplar tail for a "no" demonstration
            shown.tail = static_cast<EntityId>(
                uniform_index(rng, static_cast<std::uint64_t>(kg.num_entities())));
            if (shown.tail == ex.tail) shown.tail = (shown.tail + 1) % kg.num_entities();
        }
        auto tpl = detail::qa_fill(task, shown, kg, positive);
        prompt += render_prompt_text(tpl.instruction, tpl.input);
        prompt += tpl.answer;
        prompt += " }\n\n";
        s.exemplars.push_back(ex);
        ++used;
    }

    auto tpl = detail::qa_fill(task, triple, kg, classification_positive);
    prompt += render_prompt_text(tpl.instruction, tpl.input);
    s.prompt = std::move(prompt);
    s.gold = tpl.answer;
    return s;
}

// Prompt text -> tokens. The '}' characters build_prompt inserted after
// exemplar answers become real terminal-marker tokens; everything else goes
// through the ordinary word tokenizer.
inline TokenSeq qa_prompt_tokens(const std::string& prompt_text, const Vocab& vocab) {
    TokenSeq out;
    std::size_t start = 0;
    while (true) {
        std::size_t brace = prompt_text.find('}', start);
        std::string segment = prompt_text.substr(start, brace == std::string::npos
                                                            ? std::string::npos
                                                            : brace - start);
        TokenSeq toks = tokenize(segment, vocab);
        out.insert(out.end(), toks.begin(), toks.end());
        if (brace == std::string::npos) break;
        out.push_back(Vocab::kEosT);
        start = brace + 1;
    }
    return out;
}

// Argmax decoding until the response-terminal marker or max_new tokens.
template <typename S>
std::string greedy_decode(const Model<S>& model, const Vocab& vocab, const TokenSeq& prompt,
                          std::int32_t max_new) {
    require(max_new >= 0, "greedy_decode: max_new must be >= 0");
    require(static_cast<std::int32_t>(prompt.size()) + max_new <= model.config().max_seq_len,
            "greedy_decode: prompt plus max_new overflows the model context");
    require(!prompt.empty(), "greedy_decode: empty prompt");

    TokenSeq seq = prompt;
    TokenSeq generated;
    for (std::int32_t i = 0; i < max_new; ++i) {
        ForwardTrace<S> tr = model.forward(seq);
        Mat<S> last_logits = model.logits(tr.xf.bottomRows(1));
        Eigen::Index best = 0;
        S best_v = last_logits(0, 0);
        for (Eigen::Index v = 1; v < last_logits.cols(); ++v)
            if (last_logits(0, v) > best_v) {
                best_v = last_logits(0, v);
                best = v;
            }
        if (best == Vocab::kEosT) break;
        generated.push_back(static_cast<TokenId>(best));
        seq.push_back(static_cast<TokenId>(best));
    }
    return detokenize(generated, vocab);
}

inline std::string normalize_answer(std::string_view s) {
    return collapse_whitespace(trim(lowercase(s)));
}

// Entity/relation tasks: normalized exact match against the gold display
// name. Classification: the first yes/no token decides.
inline bool score_one(const QaSample& sample, const std::string& output) {
    if (sample.task == QaTask::TripleClassification) {
        for (const auto& w : split_words(output)) {
            if (w == "yes" || w == "no") return w == sample.gold;
        }
        return false;
    }
    return normalize_answer(output) == normalize_answer(sample.gold);
}

struct QaEvalOptions {
    std::int32_t n_samples = 200;
    std::int32_t k_shots = 2;
    std::int32_t max_new = 12;
    std::uint64_t seed = 0;
};

// Samples query triples from the test split (original relations only; the
// head task re-phrases through the inverse relation) and builds prompts.
// Classification emits a corrupted negative per positive, filtered against
// all true triples.
inline std::vector<QaSample> build_qa_eval_set(const KnowledgeGraph& kg, QaTask task,
                                               const QaEvalOptions& opts) {
    require(kg.inverse_augmented, "build_qa_eval_set: graph must be inverse-augmented");
    std::unordered_set<std::uint64_t> true_triples;
    auto code = [](EntityId h, RelationId r, EntityId t) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(h)) << 40) ^
               (static_cast<std::uint64_t>(static_cast<std::uint32_t>(r)) << 20) ^
               static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
    };
    for (const auto& split : kg.splits)
        for (const Triple& t : split) true_triples.insert(code(t.head, t.relation, t.tail));

    std::vector<Triple> candidates;
    for (const Triple& t : kg.split(Split::Test))
        if (t.relation < kg.n_original_relations) candidates.push_back(t);
    require(!candidates.empty(), "build_qa_eval_set: no original-relation test triples");

    Rng rng(derive_seed(opts.seed, "qa_eval"));
    shuffle_deterministic(candidates, rng);
    std::size_t take = std::min<std::size_t>(candidates.size(),
                                             static_cast<std::size_t>(std::max(1, opts.n_samples)));

    std::vector<QaSample> samples;
    for (std::size_t i = 0; i < take; ++i) {
        const Triple& t = candidates[i];
        std::uint64_t prompt_seed = derive_seed(opts.seed, "qa_prompt", i);
        if (task == QaTask::TripleClassification) {
            samples.push_back(build_prompt(task, t, kg, opts.k_shots, prompt_seed, true));
            Triple neg = t;
            do {
                neg.tail = static_cast<EntityId>(
                    uniform_index(rng, static_cast<std::uint64_t>(kg.num_entities())));
            } while (neg.tail == t.tail || true_triples.count(code(neg.head, neg.relation, neg.tail)));
            samples.push_back(build_prompt(task, neg, kg, opts.k_shots,
                                           derive_seed(opts.seed, "qa_prompt_neg", i), false));
        } else {
            samples.push_back(build_prompt(task, t, kg, opts.k_shots, prompt_seed));
        }
    }
    return samples;
}

struct QaScore {
    std::map<std::string, double> accuracy_by_task;
    std::map<std::string, std::int64_t> count_by_task;
    std::vector<bool> correct;
};

inline QaScore score_qa(const std::vector<QaSample>& samples,
                        const std::vector<std::string>& outputs) {
    require(samples.size() == outputs.size(), "score_qa: outputs misaligned with samples");
    QaScore sc;
    std::map<std::string, std::int64_t> hit;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        bool ok = score_one(samples[i], outputs[i]);
        sc.correct.push_back(ok);
        std::string k = qa_task_name(samples[i].task);
        sc.count_by_task[k]++;
        if (ok) hit[k]++;
    }
    for (const auto& [k, n] : sc.count_by_task)
        sc.accuracy_by_task[k] = static_cast<double>(hit[k]) / static_cast<double>(n);
    return sc;
}

template <typename S>
std::vector<std::string> decode_qa(const Model<S>& model, const Vocab& vocab,
                                   const std::vector<QaSample>& samples, std::int32_t max_new) {
    std::vector<std::string> outputs;
    outputs.reserve(samples.size());
    for (const auto& s : samples)
        outputs.push_back(greedy_decode(model, vocab, qa_prompt_tokens(s.prompt, vocab), max_new));
    return outputs;
}

}  // namespace kalign
