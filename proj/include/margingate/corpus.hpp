#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "margingate/engines.hpp"

namespace margingate {

struct CorpusSpec {
  int prompt_count = 64;
  int prompt_length = 32;
  int length_jitter = 0;  // lengths drawn uniformly from [length - jitter, length + jitter]
  std::uint64_t seed = 1234;

  void validate() const;
};

struct Corpus {
  std::vector<std::vector<int>> prompts;

  std::size_t size() const noexcept { return prompts.size(); }
  bool empty() const noexcept { return prompts.empty(); }
};

/// Token ids are drawn from [1, vocab).
Corpus generate_corpus(const CorpusSpec& spec, int vocab);

/// One prompt per line, space-separated token ids.
void write_corpus(std::ostream& out, const Corpus& corpus);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
Corpus read_corpus(const std::filesystem::path& path);

enum class LayoutKind { replicated, heterogeneous };
std::string_view to_string(LayoutKind kind) noexcept;
LayoutKind parse_layout_kind(std::string_view text);

struct Trial {
  int prompt = 0;
  int batch_size = 1;
  BatchLayout layout;
};

/// Prompt-major, then batch size in the given order. Heterogeneous layouts
/// put prompt i on the protected row and fill the other rows with the
/// following prompts, wrapping around the corpus.
std::vector<Trial> make_trials(const Corpus& corpus, std::span<const int> batch_sizes, LayoutKind kind,
                               int protected_row = 0);

/// Solo reference decode of every prompt, in corpus order.
std::vector<DecodeTrace> reference_traces(const Weights& weights, const Corpus& corpus, const DecodeConfig& cfg,
                                          int workers = 1);

}  // namespace margingate
