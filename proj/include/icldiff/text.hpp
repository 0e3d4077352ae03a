#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "nn.hpp"

// Closed-vocabulary tokenizer and the text encoder with the visual-context slot.

namespace icl {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kVcId  = 3;
inline constexpr std::string_view kVcToken = "__vc__";

class Vocabulary {
public:
    /// Specials first (<pad>, <bos>, <eos>, __vc__), then the closed word list used by prompts and captions.
    static Vocabulary standard() {
        std::vector<std::string> words = {"<pad>", "<bos>", "<eos>", std::string(kVcToken)};
        for (const char* w : {"one", "two", "three", "four", "shape", "shapes"}) {
            words.emplace_back(w);
        }
        for (auto& c : palette()) {
            words.emplace_back(c.name);
        }
        for (const char* w : {"circle", "square", "triangle", "on", "background"}) {
            words.emplace_back(w);
        }
        for (auto a : all_annotators()) {
            words.push_back(annotator_word(a));
        }
        for (const char* w : {"map", "image", "from", "best", "quality", "extremely", "detailed"}) {
            words.emplace_back(w);
        }
        return Vocabulary(words);
    }

    explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
        if (words_.size() < 4 || words_.size() > 128) {
            throw std::invalid_argument("vocabulary size must lie in [4, 128]");
        }
        if (words_[kVcId] != kVcToken) {
            throw std::invalid_argument("vocabulary id 3 must be the visual-context token");
        }
        for (size_t i = 0; i < words_.size(); i++) {
            if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
                throw std::invalid_argument("duplicate vocabulary word '" + words_[i] + "'");
            }
        }
    }

    int size() const { return static_cast<int>(words_.size()); }

    std::optional<int> find(std::string_view word) const {
        auto it = index_.find(std::string(word));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    int id(std::string_view word) const {
        auto f = find(word);
        if (!f) {
            throw std::invalid_argument("out-of-vocabulary word '" + std::string(word) + "'");
        }
        return *f;
    }

    const std::string& word(int id) const { return words_.at(static_cast<size_t>(id)); }

    /// word -> id table.
    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (size_t i = 0; i < words_.size(); i++) {
            j[words_[i]] = i;
        }
        return j;
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        std::vector<std::string> words(j.size());
        for (auto& [w, id] : j.items()) {
            auto i = id.get<int64_t>();
            if (i < 0 || i >= static_cast<int64_t>(words.size()) || !words[static_cast<size_t>(i)].empty()) {
                throw std::invalid_argument("vocabulary ids must be dense from 0");
            }
            words[static_cast<size_t>(i)] = w;
        }
        return Vocabulary(words);
    }

    bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

/// Fixed-length token ids laid out [BOS, ..., EOS, PAD...].
struct TokenSeq {
    std::vector<int> ids;
    std::optional<int> vc_position;

    int eos_position() const {
        for (size_t i = 0; i < ids.size(); i++) {
            if (ids[i] == kEosId) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    bool operator==(const TokenSeq& o) const { return ids == o.ids && vc_position == o.vc_position; }
};

enum class PromptMode { full, taskname, empty, positive };
enum class VcMode { placeholder, concat, none };

inline std::string prompt_mode_name(PromptMode m) {
    switch (m) {
        case PromptMode::full: return "full";
        case PromptMode::taskname: return "taskname";
        case PromptMode::empty: return "empty";
        case PromptMode::positive: return "positive";
    }
    return "?";
}

inline PromptMode parse_prompt_mode(std::string_view s) {
    for (auto m : {PromptMode::full, PromptMode::taskname, PromptMode::empty, PromptMode::positive}) {
        if (prompt_mode_name(m) == s) {
            return m;
        }
    }
    throw std::invalid_argument("unknown prompt mode '" + std::string(s) + "'");
}

inline std::string vc_mode_name(VcMode m) {
    switch (m) {
        case VcMode::placeholder: return "placeholder";
        case VcMode::concat: return "concat";
        case VcMode::none: return "none";
    }
    return "?";
}

inline VcMode parse_vc_mode(std::string_view s) {
    for (auto m : {VcMode::placeholder, VcMode::concat, VcMode::none}) {
        if (vc_mode_name(m) == s) {
            return m;
        }
    }
    throw std::invalid_argument("unknown context mode '" + std::string(s) + "'");
}

inline constexpr std::string_view kPositivePrompt = "best quality extremely detailed";

/// `caption` is the item's scene caption; it is only used for map2img tasks in full mode.
inline std::string build_prompt(const TaskSpec& task, const std::string& caption, PromptMode mode) {
    switch (mode) {
        case PromptMode::full: return task.direction == Direction::map2img ? caption : task.prompt_name();
        case PromptMode::taskname: return task.prompt_name();
        case PromptMode::empty: return "";
        case PromptMode::positive: return std::string(kPositivePrompt);
    }
    throw std::invalid_argument("unknown prompt mode");
}

inline std::string build_prompt(const TaskSpec& task, const Scene& scene, PromptMode mode) {
    return build_prompt(task, scene.caption(), mode);
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) {
        out.push_back(w);
    }
    return out;
}

/// Whitespace tokenization into a fixed-length sequence. With prepend_vc the layout is
/// [BOS, VC, words..., EOS, PAD...]; words that do not fit are dropped, BOS/VC/EOS never are.
inline TokenSeq tokenize(std::string_view text, bool prepend_vc, const Vocabulary& vocab, int max_len = 16) {
    const int reserved = prepend_vc ? 3 : 2;
    if (max_len < reserved) {
        throw std::invalid_argument("tokenize: max_len too small");
    }
    TokenSeq seq;
    seq.ids.assign(static_cast<size_t>(max_len), kPadId);
    std::vector<int> words;
    for (auto& w : split_words(text)) {
        words.push_back(vocab.id(w));
    }
    int pos        = 0;
    seq.ids[pos++] = kBosId;
    if (prepend_vc) {
        seq.vc_position = pos;
        seq.ids[pos++]  = kVcId;
    }
    const int room = max_len - reserved;
    for (int i = 0; i < static_cast<int>(words.size()) && i < room; i++) {
        if (words[static_cast<size_t>(i)] == kVcId) {
            if (seq.vc_position) {
                throw std::invalid_argument("tokenize: at most one visual-context token per prompt");
            }
            seq.vc_position = pos;
        }
        seq.ids[static_cast<size_t>(pos++)] = words[static_cast<size_t>(i)];
    }
    seq.ids[static_cast<size_t>(pos)] = kEosId;
    return seq;
}

/// Inverse of tokenize for words; special tokens are dropped.
inline std::string detokenize(const TokenSeq& seq, const Vocabulary& vocab) {
    std::string out;
    for (int id : seq.ids) {
        if (id == kPadId || id == kBosId || id == kEosId || id == kVcId) {
            continue;
        }
        if (!out.empty()) {
            out += " ";
        }
        out += vocab.word(id);
    }
    return out;
}

/// Index of the sequence element that receives the context vector, or -1 for the pure-text path.
inline int vc_slot(const TokenSeq& seq, VcMode mode) {
    switch (mode) {
        case VcMode::none: return -1;
        case VcMode::placeholder:
            if (!seq.vc_position) {
                throw std::invalid_argument("placeholder mode requires a __vc__ token in the sequence");
            }
            return *seq.vc_position;
        case VcMode::concat: {
            if (seq.vc_position || std::find(seq.ids.begin(), seq.ids.end(), kVcId) != seq.ids.end()) {
                throw std::invalid_argument("concat mode requires a sequence without __vc__");
            }
            int eos = seq.eos_position();
            if (eos < 0 || eos + 1 >= static_cast<int>(seq.ids.size()) || seq.ids[static_cast<size_t>(eos + 1)] != kPadId) {
                throw std::invalid_argument("concat mode needs a free PAD slot after EOS");
            }
            return eos + 1;
        }
    }
    throw std::invalid_argument("unknown context mode");
}

struct TextInput {
    TokenSeq tokens;
    VcMode mode = VcMode::none;
};

struct TextConfig {
    int max_len = 16;
    int width   = 128;
    int layers  = 2;
    int heads   = 4;
};

/// Token embedding + bidirectional transformer. The embedding row at the context slot is overwritten by
/// the visual-context vector before positional embeddings are added.
template <typename T>
class TextEncoder : public Module<T> {
public:
    TextEncoder(int vocab_size, const TextConfig& cfg, Rng& rng) : cfg_(cfg) {
        token_embedding    = this->param("token_embedding", normal_tensor<T>({vocab_size, cfg.width}, 0.02, rng));
        position_embedding = this->param("position_embedding", normal_tensor<T>({cfg.max_len, cfg.width}, 0.01, rng));
        null_context       = this->param("null_context", Tensor<T>({cfg.width}));
        for (int i = 0; i < cfg.layers; i++) {
            blocks.push_back(this->child("blocks." + std::to_string(i),
                                         std::make_shared<TransformerBlock<T>>(cfg.width, cfg.heads, rng)));
        }
        ln_final = this->child("ln_final", std::make_shared<LayerNorm<T>>(cfg.width));
    }

    const TextConfig& config() const { return cfg_; }
    int64_t width() const { return cfg_.width; }

    /// Substituted token embeddings before positional add: [B, L, d]. vc is [B, d]; rows of items whose
    /// mode is none are ignored, and vc may be undefined when every item is none.
    Var<T> embed(const std::vector<TextInput>& inputs, const Var<T>& vc) const {
        const auto B = static_cast<int64_t>(inputs.size());
        const int64_t L = cfg_.max_len;
        std::vector<int> ids;
        std::vector<int> slots;
        bool any = false;
        for (auto& in : inputs) {
            check_shape(static_cast<int64_t>(in.tokens.ids.size()) == L, "text: token sequence length " +
                                                                             std::to_string(in.tokens.ids.size()) +
                                                                             " != " + std::to_string(L));
            ids.insert(ids.end(), in.tokens.ids.begin(), in.tokens.ids.end());
            slots.push_back(vc_slot(in.tokens, in.mode));
            any = any || slots.back() >= 0;
        }
        auto emb = gather_rows(token_embedding, ids, B, L);
        if (!any) {
            return emb;
        }
        check_shape(vc.defined() && vc.shape() == Shape{B, cfg_.width},
                    "text: context vectors must be [" + std::to_string(B) + ", " + std::to_string(cfg_.width) + "]");
        return replace_rows(emb, slots, vc);
    }

    /// Cross-attention context [B, L, d].
    Var<T> encode(const std::vector<TextInput>& inputs, const Var<T>& vc) const {
        auto x = add_broadcast(embed(inputs, vc), position_embedding);
        for (auto& b : blocks) {
            x = b->forward(x);
        }
        return ln_final->forward(x);
    }

    /// Single-sequence form. A missing vc in placeholder/concat mode means "context dropped":
    /// the learned null-context vector takes the slot.
    Var<T> encode_text(const TokenSeq& tokens, const std::optional<Var<T>>& vc, VcMode mode) const {
        Var<T> row;
        if (mode != VcMode::none) {
            Var<T> v = vc ? *vc : null_context;
            check_shape(v.shape() == Shape{cfg_.width} || v.shape() == Shape{1, cfg_.width},
                        "text: context vector width " + shape_str(v.shape()) + " != " + std::to_string(cfg_.width));
            row = reshape(v, {1, cfg_.width});
        }
        return encode({TextInput{tokens, mode}}, row);
    }

    Var<T> token_embedding;
    Var<T> position_embedding;
    Var<T> null_context;
    std::vector<std::shared_ptr<TransformerBlock<T>>> blocks;
    std::shared_ptr<LayerNorm<T>> ln_final;

private:
    TextConfig cfg_;
};

}  // namespace icl
