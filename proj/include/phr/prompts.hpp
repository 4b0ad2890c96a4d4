#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phr/common.hpp"
#include "phr/rng.hpp"

namespace phr {

enum class CaseKind { non_tumorous, tumorous };
enum class SizeDesc { small, mild, medium, moderate, large };

inline const char* to_string(SizeDesc s) {
    switch (s) {
        case SizeDesc::small: return "small";
        case SizeDesc::mild: return "mild";
        case SizeDesc::medium: return "medium";
        case SizeDesc::moderate: return "moderate";
        default: return "large";
    }
}

/// Tumor size bins over [lo, hi] pixel counts. The anchors sit at fixed
/// fractions of the range; a count on a boundary belongs to the lower bin.
inline SizeDesc size_category(i64 tumor_pixel_count, i64 lo = 1000, i64 hi = 3000) {
    require(lo < hi, "size_category: invalid range");
    require(tumor_pixel_count >= lo && tumor_pixel_count <= hi,
            "size_category: count outside tumorous range");
    i64 span = hi - lo;
    auto edge = [&](double f) { return lo + static_cast<i64>(std::llround(f * static_cast<double>(span))); };
    if (tumor_pixel_count <= edge(0.2)) return SizeDesc::small;
    if (tumor_pixel_count <= edge(0.425)) return SizeDesc::mild;
    if (tumor_pixel_count <= edge(0.575)) return SizeDesc::medium;
    if (tumor_pixel_count <= edge(0.825)) return SizeDesc::moderate;
    return SizeDesc::large;
}

/// A rendered per-slice prompt plus the metadata it was rendered from.
struct PromptSpec {
    CaseKind case_kind = CaseKind::non_tumorous;
    std::string modality = "T1CE MRI";
    std::string age_desc;               // "N-year-old" or "unknown age"
    std::optional<SizeDesc> size_desc;  // present iff tumorous
    int template_index = 1;             // 1..3
    std::string text;
};

namespace detail {

inline std::string substitute(std::string tpl, const std::string& key, const std::string& value) {
    auto pos = tpl.find(key);
    while (pos != std::string::npos) {
        tpl.replace(pos, key.size(), value);
        pos = tpl.find(key, pos + value.size());
    }
    return tpl;
}

}  // namespace detail

inline const std::vector<std::string>& non_tumorous_templates() {
    static const std::vector<std::string> t = {
        "{modality} of a {age_desc} healthy individual.",
        "A {age_desc} healthy person undergoing {modality}.",
        "{modality} image of a healthy brain (age: {age_desc}).",
    };
    return t;
}

inline const std::vector<std::string>& tumorous_templates() {
    static const std::vector<std::string> t = {
        "{modality} of a {age_desc} patient with a {size_desc} tumor.",
        "A {age_desc} patient's {modality} scan showing a {size_desc} tumor.",
        "{modality} image showing a {size_desc} brain tumor in a {age_desc} patient.",
    };
    return t;
}

inline std::string render_age_desc(const std::optional<double>& age) {
    if (!age.has_value()) return "unknown age";
    return std::to_string(static_cast<long long>(std::llround(*age))) + "-year-old";
}

inline std::string render_size_desc(SizeDesc s) { return std::string(to_string(s)) + "-sized"; }

/// Picks one of the three templates uniformly and substitutes placeholders
/// literally. Tumorous prompts require a size descriptor; non-tumorous
/// prompts must not carry one.
inline PromptSpec render_prompt(CaseKind kind, const std::optional<double>& age,
                                std::optional<SizeDesc> size, Rng& rng,
                                const std::string& modality = "T1CE MRI") {
    if (kind == CaseKind::tumorous) require(size.has_value(), "tumorous prompt requires size_desc");
    else require(!size.has_value(), "non-tumorous prompt must not carry size_desc");

    PromptSpec spec;
    spec.case_kind = kind;
    spec.modality = modality;
    spec.age_desc = render_age_desc(age);
    spec.size_desc = size;
    spec.template_index = static_cast<int>(rng.uniform_int(1, 3));

    const auto& templates =
        kind == CaseKind::tumorous ? tumorous_templates() : non_tumorous_templates();
    std::string text = templates[static_cast<std::size_t>(spec.template_index - 1)];
    text = detail::substitute(text, "{modality}", modality);
    text = detail::substitute(text, "{age_desc}", spec.age_desc);
    if (size.has_value()) text = detail::substitute(text, "{size_desc}", render_size_desc(*size));
    spec.text = text;
    return spec;
}

// ---------------------------------------------------------------------------

/// Fixed-length token sequence: always exactly 77 ids, trailing slots padded.
struct TokenSequence {
    static constexpr i64 kLength = 77;
    std::vector<int> ids;  // size 77
    int pad_id = 0;
};

/// Whitespace/punctuation tokenizer over a fixed vocabulary built from the
/// prompt templates and their placeholder values. Digits are individual
/// tokens so any age renders into vocabulary. Satisfies the same
/// 77-token contract a CLIP-compatible tokenizer plugs into at scale.
class Tokenizer {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;

    Tokenizer() {
        // "t1ce" splits at the digit, so its alphabetic pieces are vocabulary
        std::vector<std::string> words = {
            "<pad>", "<unk>", "t", "ce", "mri", "of", "a", "healthy", "individual", ".",
            "person", "undergoing", "image", "brain", "(", "age", ":", ")", "patient",
            "with", "tumor", "'", "s", "scan", "showing", "in", "year", "old", "-",
            "unknown", "small", "mild", "medium", "moderate", "large", "sized",
            "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
        for (std::size_t i = 0; i < words.size(); ++i) vocab_[words[i]] = static_cast<int>(i);
    }

    int vocab_size() const { return static_cast<int>(vocab_.size()); }

    std::vector<std::string> split(const std::string& text) const {
        std::vector<std::string> tokens;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                tokens.push_back(cur);
                cur.clear();
            }
        };
        for (char ch : text) {
            unsigned char c = static_cast<unsigned char>(ch);
            if (std::isspace(c)) {
                flush();
            } else if (std::isalpha(c)) {
                cur.push_back(static_cast<char>(std::tolower(c)));
            } else if (std::isdigit(c)) {
                flush();
                tokens.push_back(std::string(1, ch));  // digit-level tokens
            } else {
                flush();
                tokens.push_back(std::string(1, ch));
            }
        }
        flush();
        return tokens;
    }

    TokenSequence tokenize(const std::string& text) const {
        require(!text.empty(), "tokenize: empty text");
        TokenSequence seq;
        seq.pad_id = kPadId;
        seq.ids.reserve(TokenSequence::kLength);
        for (const auto& tok : split(text)) {
            if (static_cast<i64>(seq.ids.size()) == TokenSequence::kLength) break;
            auto it = vocab_.find(tok);
            seq.ids.push_back(it == vocab_.end() ? kUnkId : it->second);
        }
        while (static_cast<i64>(seq.ids.size()) < TokenSequence::kLength)
            seq.ids.push_back(kPadId);
        return seq;
    }

private:
    std::map<std::string, int> vocab_;
};

}  // namespace phr
