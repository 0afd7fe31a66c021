#include "margingate/corpus.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "margingate/errors.hpp"
#include "margingate/parallel.hpp"
#include "margingate/rng.hpp"

namespace margingate {

void CorpusSpec::validate() const {
  if (prompt_count < 0) throw InvalidArgument("corpus: prompt_count must be >= 0");
  if (prompt_length < 1) throw InvalidArgument("corpus: prompt_length must be >= 1");
  if (length_jitter < 0 || length_jitter >= prompt_length) {
    throw InvalidArgument("corpus: length_jitter must be in [0, prompt_length)");
  }
}

Corpus generate_corpus(const CorpusSpec& spec, int vocab) {
  spec.validate();
  if (vocab < 2) throw InvalidArgument("corpus: vocab must be >= 2");
  SplitMix64 rng(spec.seed);
  Corpus corpus;
  corpus.prompts.reserve(static_cast<std::size_t>(spec.prompt_count));
  for (int i = 0; i < spec.prompt_count; ++i) {
    int length = spec.prompt_length;
    if (spec.length_jitter > 0) {
      length += static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * spec.length_jitter + 1))) -
                spec.length_jitter;
    }
    std::vector<int> prompt(static_cast<std::size_t>(length));
    for (int& tok : prompt) tok = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
    corpus.prompts.push_back(std::move(prompt));
  }
  return corpus;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& prompt : corpus.prompts) {
    for (std::size_t j = 0; j < prompt.size(); ++j) {
      if (j) out << ' ';
      out << prompt[j];
    }
    out << '\n';
  }
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  write_corpus(out, corpus);
  if (!out) throw std::runtime_error("failed writing corpus file " + path.string());
}

Corpus read_corpus(std::istream& in) {
  Corpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<int> prompt;
    std::string word;
    while (ls >> word) {
      std::size_t used = 0;
      int tok = 0;
      try {
        tok = std::stoi(word, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != word.size() || tok < 0) {
        throw InvalidArgument("corpus line " + std::to_string(line_no) + ": bad token '" + word + "'");
      }
      prompt.push_back(tok);
    }
    corpus.prompts.push_back(std::move(prompt));
  }
  return corpus;
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file " + path.string());
  return read_corpus(in);
}

std::string_view to_string(LayoutKind kind) noexcept {
  return kind == LayoutKind::replicated ? "replicated" : "heterogeneous";
}

LayoutKind parse_layout_kind(std::string_view text) {
  if (text == "replicated") return LayoutKind::replicated;
  if (text == "heterogeneous") return LayoutKind::heterogeneous;
  throw InvalidArgument("unknown batch layout '" + std::string(text) + "'");
}

std::vector<Trial> make_trials(const Corpus& corpus, std::span<const int> batch_sizes, LayoutKind kind,
                               int protected_row) {
  for (int bs : batch_sizes) {
    if (bs < 1) throw InvalidArgument("batch sizes must be >= 1");
    if (protected_row < 0 || protected_row >= bs) {
      throw InvalidArgument("protected row " + std::to_string(protected_row) + " outside batch size " +
                            std::to_string(bs));
    }
  }
  std::vector<Trial> trials;
  const int n = static_cast<int>(corpus.size());
  for (int i = 0; i < n; ++i) {
    for (int bs : batch_sizes) {
      Trial t;
      t.prompt = i;
      t.batch_size = bs;
      if (kind == LayoutKind::replicated) {
        t.layout = BatchLayout::replicated(corpus.prompts[i], bs);
        t.layout.protected_row = protected_row;
      } else {
        t.layout.protected_row = protected_row;
        t.layout.rows.resize(static_cast<std::size_t>(bs));
        int next = i;
        for (int r = 0; r < bs; ++r) {
          if (r == protected_row) {
            t.layout.rows[r] = corpus.prompts[i];
          } else {
            next = (next + 1) % n;
            t.layout.rows[r] = corpus.prompts[next];
          }
        }
      }
      trials.push_back(std::move(t));
    }
  }
  return trials;
}

std::vector<DecodeTrace> reference_traces(const Weights& weights, const Corpus& corpus, const DecodeConfig& cfg,
                                          int workers) {
  return parallel_map(corpus.size(), workers,
                      [&](std::size_t i) { return decode_reference(weights, corpus.prompts[i], cfg); });
}

}  // namespace margingate
