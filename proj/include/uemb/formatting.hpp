#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uemb/error.hpp"

namespace uemb {

/// Input modality of a query or target: any non-empty combination of
/// text (T), image (I), video (V) and visual document (D).
class Modality {
 public:
  enum Component : std::uint8_t { kText = 1, kImage = 2, kVideo = 4, kDocument = 8 };

  constexpr Modality() = default;
  constexpr explicit Modality(std::uint8_t bits) : bits_(bits) {}

  static constexpr Modality text() { return Modality(kText); }
  static constexpr Modality image() { return Modality(kImage); }
  static constexpr Modality video() { return Modality(kVideo); }
  static constexpr Modality document() { return Modality(kDocument); }

  /// Accepts "T", "I", "V", "D" and '+'-joined combinations such as "T+V" or
  /// "V + T". Component order does not matter.
  static Modality parse(std::string_view code) {
    std::uint8_t bits = 0;
    bool expect_component = true;
    for (char c : code) {
      if (c == ' ' || c == '\t') continue;
      if (c == '+') {
        if (expect_component) throw ValidationError("bad modality code '" + std::string(code) + "'");
        expect_component = true;
        continue;
      }
      if (!expect_component) throw ValidationError("bad modality code '" + std::string(code) + "'");
      std::uint8_t bit = 0;
      switch (c) {
        case 'T': bit = kText; break;
        case 'I': bit = kImage; break;
        case 'V': bit = kVideo; break;
        case 'D': bit = kDocument; break;
        default:
          throw ValidationError("unknown modality code '" + std::string(code) + "'");
      }
      if (bits & bit) throw ValidationError("repeated modality in '" + std::string(code) + "'");
      bits |= bit;
      expect_component = false;
    }
    if (bits == 0 || expect_component) {
      throw ValidationError("bad modality code '" + std::string(code) + "'");
    }
    return Modality(bits);
  }

  constexpr bool has(Component c) const { return (bits_ & c) != 0; }
  constexpr bool is_visual() const { return (bits_ & (kImage | kVideo | kDocument)) != 0; }
  constexpr std::uint8_t bits() const { return bits_; }

  /// Canonical code, components in T, I, V, D order.
  std::string code() const {
    std::string out;
    for (auto [bit, ch] : {std::pair{kText, 'T'}, {kImage, 'I'}, {kVideo, 'V'}, {kDocument, 'D'}}) {
      if (bits_ & bit) {
        if (!out.empty()) out += '+';
        out += ch;
      }
    }
    return out;
  }

  friend constexpr bool operator==(Modality, Modality) = default;

 private:
  std::uint8_t bits_ = 0;
};

/// Token text prepended for each visual component.
struct VisualTokenTable {
  std::map<Modality::Component, std::string> tokens;

  /// Qwen2-VL style placeholders; document pages are fed as images.
  static VisualTokenTable qwen2_vl() {
    return {{{Modality::kImage, "<|image_pad|>"},
             {Modality::kVideo, "<|video_pad|>"},
             {Modality::kDocument, "<|image_pad|>"}}};
  }

  /// Space-joined tokens for the visual components of `m`, in I, V, D order.
  std::string prefix_for(Modality m) const {
    std::string out;
    for (auto c : {Modality::kImage, Modality::kVideo, Modality::kDocument}) {
      if (!m.has(c)) continue;
      auto it = tokens.find(c);
      if (it == tokens.end() || it->second.empty()) {
        throw ValidationError("no visual token configured for modality '" +
                              Modality(c).code() + "'");
      }
      if (!out.empty()) out += ' ';
      out += it->second;
    }
    return out;
  }
};

/// Text templates with `{instruction}` and `{query}` placeholders. The visual
/// token prefix is added outside the template.
struct PromptTemplates {
  std::string query = "Instruct: {instruction}\nQuery: {query}";
  std::string target = "{instruction}";
  VisualTokenTable tokens = VisualTokenTable::qwen2_vl();
};

struct RenderedQuery {
  std::string text;
  std::vector<std::string> visual_refs;
  Modality modality;
};

struct RenderedTarget {
  std::string text;
  std::vector<std::string> visual_refs;
  Modality modality;
};

namespace detail {

inline std::string substitute(std::string_view tmpl, std::string_view instruction,
                              std::string_view query) {
  std::string out;
  out.reserve(tmpl.size() + instruction.size() + query.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.substr(i, 13) == "{instruction}") {
      out += instruction;
      i += 13;
    } else if (tmpl.substr(i, 7) == "{query}") {
      out += query;
      i += 7;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

inline std::string join_prefix(std::string prefix, std::string body) {
  if (prefix.empty()) return body;
  if (body.empty()) return prefix;
  return prefix + ' ' + body;
}

}  // namespace detail

inline RenderedQuery render_query(std::string_view task_instruction, std::string_view query_text,
                                  Modality modality, const PromptTemplates& templates = {},
                                  std::vector<std::string> visual_refs = {}) {
  if (task_instruction.empty()) throw ValidationError("render_query: empty task instruction");
  std::string prefix = templates.tokens.prefix_for(modality);
  return {detail::join_prefix(std::move(prefix),
                              detail::substitute(templates.query, task_instruction, query_text)),
          std::move(visual_refs), modality};
}

/// The target instruction may be empty; a text-only target with no
/// instruction renders as the empty string.
inline RenderedTarget render_target(std::string_view target_instruction, Modality modality,
                                    const PromptTemplates& templates = {},
                                    std::vector<std::string> visual_refs = {}) {
  std::string prefix = templates.tokens.prefix_for(modality);
  std::string body =
      target_instruction.empty() ? std::string()
                                 : detail::substitute(templates.target, target_instruction, {});
  return {detail::join_prefix(std::move(prefix), std::move(body)), std::move(visual_refs),
          modality};
}

/// Center-of-bin frame selection: index_i = floor((i + 0.5) * n_frames / k).
inline std::vector<std::size_t> sample_frame_indices(std::size_t n_frames, std::size_t k) {
  if (n_frames == 0) throw DegenerateInputError("sample_frame_indices: zero-length video");
  if (k == 0) throw ValidationError("sample_frame_indices: k must be at least 1");
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = ((2 * i + 1) * n_frames) / (2 * k);
  return out;
}

}  // namespace uemb
