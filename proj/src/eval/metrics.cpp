#include "m2m/eval/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "m2m/core/error.hpp"

namespace m2m::eval {

namespace {

double mismatch_fraction(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] != 0) != (b[i] != 0) ? 1 : 0;
  return a.empty() ? 0.0 : static_cast<double>(diff) / static_cast<double>(a.size());
}

}  // namespace

double hamming_mean(const Pianoroll& a, const Pianoroll& b) {
  if (a.dims() != b.dims()) {
    throw ContractError("hamming_mean: shapes " + to_string(a.dims()) + " and " + to_string(b.dims()) + " differ");
  }
  return mismatch_fraction(a.cells(), b.cells());
}

double hamming_mean(const Mixture& a, const Mixture& b) {
  if (a.steps() != b.steps() || a.pitches() != b.pitches()) throw ContractError("hamming_mean: mixture shapes differ");
  return mismatch_fraction(a.cells(), b.cells());
}

double consistency(std::span<const Pianoroll> samples, std::span<const Mixture> mixtures) {
  if (samples.size() != mixtures.size()) throw ContractError("consistency: list lengths differ");
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) acc += hamming_mean(mixture_from_roll(samples[i]), mixtures[i]);
  return acc / static_cast<double>(samples.size());
}

double diversity(std::span<const Pianoroll> samples, std::span<const Pianoroll> originals) {
  if (samples.size() != originals.size()) throw ContractError("diversity: list lengths differ");
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) acc += hamming_mean(samples[i], originals[i]);
  return acc / static_cast<double>(samples.size());
}

std::vector<std::optional<Pianoroll>> DiffusionSeparator::separate(std::span<const Mixture> mixtures,
                                                                   std::uint64_t first_stream) const {
  auto results = diffusion::sample_batch(denoiser_, decoder_, mixtures, sched_, cfg_, channels_, first_stream);
  std::vector<std::optional<Pianoroll>> out;
  for (auto& r : results) out.push_back(std::move(r.roll));
  return out;
}

std::vector<std::optional<Pianoroll>> VaeSeparator::separate(std::span<const Mixture> mixtures,
                                                             std::uint64_t first_stream) const {
  auto probs = model::vae_forward(model_, mixtures, model::LatentMode::Prior, seed_, first_stream);
  std::vector<std::optional<Pianoroll>> out;
  for (const RealGrid& p : probs) {
    if (!std::all_of(p.values.begin(), p.values.end(), [](double v) { return std::isfinite(v); })) {
      out.emplace_back();
      continue;
    }
    Pianoroll roll(p.dims);
    auto cells = roll.cells();
    for (std::size_t k = 0; k < cells.size(); ++k) cells[k] = p.values[k] > 0.5 ? 1 : 0;
    out.emplace_back(std::move(roll));
  }
  return out;
}

MetricsReport evaluate(const Separator& separator, std::span<const Phrase> split, std::size_t batch) {
  if (split.empty()) throw ConfigError("evaluation split is empty");
  MetricsReport report;
  report.model = separator.tag();
  batch = std::max<std::size_t>(1, batch);
  double cons = 0.0, div = 0.0;
  for (std::size_t begin = 0; begin < split.size(); begin += batch) {
    const std::size_t n = std::min(batch, split.size() - begin);
    std::vector<Mixture> mixtures;
    for (std::size_t i = 0; i < n; ++i) mixtures.push_back(mixture_from_roll(split[begin + i].roll));
    auto outs = separator.separate(mixtures, begin);
    if (outs.size() != n) throw ContractError("separator returned the wrong number of samples");
    for (std::size_t i = 0; i < n; ++i) {
      SampleRow row;
      row.index = begin + i;
      if (outs[i]) {
        row.ok = true;
        row.consistency = hamming_mean(mixture_from_roll(*outs[i]), mixtures[i]);
        row.diversity = hamming_mean(*outs[i], split[begin + i].roll);
        cons += row.consistency;
        div += row.diversity;
        ++report.sample_count;
      } else {
        ++report.failed;
      }
      report.rows.push_back(row);
    }
  }
  if (report.sample_count > 0) {
    report.consistency = cons / static_cast<double>(report.sample_count);
    report.diversity = div / static_cast<double>(report.sample_count);
  }
  return report;
}

std::string MetricsReport::to_text() const {
  std::string s = fmt::format("model {}\nconsistency {:.17g}\ndiversity {:.17g}\nn {}\nfailed {}\n", model, consistency,
                              diversity, sample_count, failed);
  s += "index\tok\tconsistency\tdiversity\n";
  for (const auto& r : rows) {
    s += fmt::format("{}\t{}\t{:.17g}\t{:.17g}\n", r.index, r.ok ? 1 : 0, r.consistency, r.diversity);
  }
  return s;
}

std::string comparison_table(std::span<const MetricsReport> reports) {
  std::string s = fmt::format("{:<16} {:>14} {:>14} {:>8} {:>8}\n", "model", "consistency", "diversity", "n", "failed");
  for (const auto& r : reports) {
    s += fmt::format("{:<16} {:>14.4e} {:>14.4e} {:>8} {:>8}\n", r.model, r.consistency, r.diversity, r.sample_count,
                     r.failed);
  }
  return s;
}

}  // namespace m2m::eval
