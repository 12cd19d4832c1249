#pragma once
// Word-level tokenization, dual-view marker wrapping, and instruction-sample
// construction.
//
// The four view markers are single dedicated tokens:
//   "[" opens and "]" closes a head+relation view,
//   "{" opens and "}" closes a tail view.
// Raw marker characters inside input text are replaced by spaces before
// tokenization, so a marker id can only ever appear at the two designated
// positions of an encoded view.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/kg_store.hpp"
#include "kalign/templates.hpp"

namespace kalign {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class View { HR, T };

struct Vocab {
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kBosHr = 2;  // "["
    static constexpr TokenId kEosHr = 3;  // "]"
    static constexpr TokenId kBosT = 4;   // "{"
    static constexpr TokenId kEosT = 5;   // "}"
    static constexpr std::int32_t kNumSpecials = 6;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, TokenId> ids;

    std::int32_t size() const { return static_cast<std::int32_t>(tokens.size()); }

    TokenId id_or_unk(const std::string& tok) const {
        auto it = ids.find(tok);
        return it == ids.end() ? kUnk : it->second;
    }

    static TokenId bos(View v) { return v == View::HR ? kBosHr : kBosT; }
    static TokenId eos(View v) { return v == View::HR ? kEosHr : kEosT; }

    std::uint64_t hash() const { return fnv1a(tokens); }
};

namespace detail {

inline bool is_marker_char(char c) { return c == '[' || c == ']' || c == '{' || c == '}'; }

}  // namespace detail

// Lowercased word/punctuation split. Alphanumeric runs form one token; any
// other printable character is its own token. Marker characters are blanked.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&out, &cur]() {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (detail::is_marker_char(raw) || std::isspace(c)) {
            flush();
        } else if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            out.push_back(std::string(1, raw));
        }
    }
    flush();
    return out;
}

inline std::string strip_markers(std::string_view text) {
    std::string out(text);
    for (char& c : out)
        if (detail::is_marker_char(c)) c = ' ';
    return out;
}

inline TokenSeq tokenize(std::string_view text, const Vocab& vocab) {
    TokenSeq seq;
    for (const auto& w : split_words(text)) seq.push_back(vocab.id_or_unk(w));
    return seq;
}

inline std::string detokenize(const TokenSeq& seq, const Vocab& vocab) {
    std::string out;
    for (TokenId t : seq) {
        if (t < 0 || t >= vocab.size()) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.tokens[static_cast<std::size_t>(t)];
    }
    return out;
}

// Most-frequent tokens up to max_size; ties broken by first occurrence so
// ids are stable across runs.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::int32_t max_size) {
    require(max_size >= Vocab::kNumSpecials,
            "build_vocab: max size smaller than the number of reserved specials");
    require(!corpus.empty(), "build_vocab: empty corpus");

    struct Stat {
        std::int64_t count = 0;
        std::int64_t first = 0;
    };
    std::unordered_map<std::string, Stat> stats;
    std::int64_t next = 0;
    for (const auto& text : corpus) {
        for (auto& w : split_words(text)) {
            auto [it, inserted] = stats.try_emplace(std::move(w));
            if (inserted) it->second.first = next++;
            it->second.count++;
        }
    }

    std::vector<std::pair<std::string, Stat>> ordered(stats.begin(), stats.end());
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second.count != b.second.count) return a.second.count > b.second.count;
        return a.second.first < b.second.first;
    });

    Vocab v;
    v.tokens = {"<pad>", "<unk>", "[", "]", "{", "}"};
    for (const auto& [tok, stat] : ordered) {
        if (v.size() >= max_size) break;
        v.tokens.push_back(tok);
    }
    for (TokenId i = 0; i < v.size(); ++i) v.ids.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    return v;
}

inline void save_vocab(const Vocab& v, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    require(out.good(), "save_vocab: cannot write " + file.string());
    for (const auto& t : v.tokens) out << t << '\n';
}

inline Vocab load_vocab(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    require(in.good(), "load_vocab: cannot read " + file.string());
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.tokens.push_back(line);
    }
    require(v.size() >= Vocab::kNumSpecials, "load_vocab: fewer tokens than reserved specials");
    for (TokenId i = 0; i < v.size(); ++i) v.ids.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    return v;
}

// [bos]_view + tokens (first max_len-2 kept) + [eos]_view.
inline TokenSeq encode_view(std::string_view text, View view, const Vocab& vocab,
                            std::int32_t max_len) {
    require(max_len >= 3, "encode_view: max_len must be at least 3");
    TokenSeq body = tokenize(text, vocab);
    if (static_cast<std::int32_t>(body.size()) > max_len - 2)
        body.resize(static_cast<std::size_t>(max_len - 2));
    TokenSeq out;
    out.reserve(body.size() + 2);
    out.push_back(Vocab::bos(view));
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(Vocab::eos(view));
    return out;
}

struct InstructionSample {
    TokenSeq prompt;            // template + inst + hr text
    TokenSeq target;            // tail text + terminal marker
    std::vector<bool> loss_mask;  // over prompt+target; true exactly on target

    TokenSeq full() const {
        TokenSeq all = prompt;
        all.insert(all.end(), target.begin(), target.end());
        return all;
    }
};

inline std::string render_prompt_text(std::string_view instruction, std::string_view input) {
    std::string s;
    s += templates::kPromptPreamble;
    s += "\n\n";
    s += templates::kInstructionHeader;
    s += "\n";
    s += instruction;
    s += "\n\n";
    s += templates::kInputHeader;
    s += "\n";
    s += input;
    s += "\n\n";
    s += templates::kResponseHeader;
    s += "\n";
    return s;
}

// Prompt token layout: template tokens with the input's token ids spliced in
// directly (template boundaries fall on newlines, so word splitting cannot
// straddle them).
inline TokenSeq assemble_prompt_tokens(std::string_view instruction, const TokenSeq& input_body,
                                       const Vocab& vocab) {
    std::string prefix;
    prefix += templates::kPromptPreamble;
    prefix += "\n\n";
    prefix += templates::kInstructionHeader;
    prefix += "\n";
    prefix += instruction;
    prefix += "\n\n";
    prefix += templates::kInputHeader;
    prefix += "\n";
    std::string suffix;
    suffix += "\n\n";
    suffix += templates::kResponseHeader;
    suffix += "\n";

    TokenSeq prompt = tokenize(prefix, vocab);
    prompt.insert(prompt.end(), input_body.begin(), input_body.end());
    TokenSeq tail = tokenize(suffix, vocab);
    prompt.insert(prompt.end(), tail.begin(), tail.end());
    return prompt;
}

// Builds one triple-completion sample. hr/t texts are truncated to
// max_desc_len tokens; the whole sample is capped at max_lm_len with the
// terminal marker always kept.
inline InstructionSample render_instruction(const KnowledgePair& pair, const Vocab& vocab,
                                            std::int32_t max_desc_len = 50,
                                            std::int32_t max_lm_len = 256) {
    require(!pair.hr_text.empty() && !pair.t_text.empty(),
            "render_instruction: empty pair text");
    auto truncate = [](TokenSeq seq, std::int32_t cap) {
        if (cap >= 0 && static_cast<std::int32_t>(seq.size()) > cap)
            seq.resize(static_cast<std::size_t>(cap));
        return seq;
    };
    TokenSeq hr_body = truncate(tokenize(pair.hr_text, vocab), max_desc_len);
    TokenSeq t_body = truncate(tokenize(pair.t_text, vocab), max_desc_len);

    InstructionSample s;
    s.prompt = assemble_prompt_tokens(templates::kTripleCompletionInstruction, hr_body, vocab);
    require(static_cast<std::int32_t>(s.prompt.size()) + 2 <= max_lm_len,
            "render_instruction: prompt does not fit max-language-modeling-length");

    std::int32_t room = max_lm_len - static_cast<std::int32_t>(s.prompt.size()) - 1;
    s.target = truncate(std::move(t_body), room);
    s.target.push_back(Vocab::kEosT);

    s.loss_mask.assign(s.prompt.size(), false);
    s.loss_mask.insert(s.loss_mask.end(), s.target.size(), true);
    return s;
}

}  // namespace kalign
