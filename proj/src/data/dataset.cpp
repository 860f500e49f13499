#include "m2m/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "m2m/core/error.hpp"
#include "m2m/core/rng.hpp"

namespace m2m {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "'");
}

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class LeReader {
 public:
  explicit LeReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t pos() const { return pos_; }

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw ParseError(std::string("truncated dataset while reading ") + what, pos_);
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_dataset(std::span<const Phrase> phrases, Dims dims) {
  std::vector<std::uint8_t> out(kDatasetMagic.begin(), kDatasetMagic.end());
  put_le<std::uint16_t>(out, kDatasetVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.t));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.p));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.c));
  put_le<std::uint64_t>(out, phrases.size());
  for (const Phrase& ph : phrases) {
    if (ph.roll.dims() != dims) throw ContractError("encode_dataset: phrase dims " + to_string(ph.roll.dims()));
    if (ph.source_id.size() > 0xffff) throw ContractError("encode_dataset: source id too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ph.source_id.size()));
    out.insert(out.end(), ph.source_id.begin(), ph.source_id.end());
    put_le<std::uint32_t>(out, ph.bar_offset);
    auto cells = ph.roll.cells();
    std::uint8_t acc = 0;
    int nbits = 0;
    for (std::uint8_t c : cells) {
      acc = static_cast<std::uint8_t>((acc << 1) | (c & 1));
      if (++nbits == 8) {
        out.push_back(acc);
        acc = 0;
        nbits = 0;
      }
    }
    if (nbits > 0) out.push_back(static_cast<std::uint8_t>(acc << (8 - nbits)));
  }
  return out;
}

std::vector<Phrase> decode_dataset(std::span<const std::uint8_t> bytes) {
  LeReader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kDatasetMagic.begin())) throw ParseError("bad dataset magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kDatasetVersion) throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  Dims dims;
  dims.t = static_cast<int>(r.get<std::uint32_t>("dims"));
  dims.p = static_cast<int>(r.get<std::uint32_t>("dims"));
  dims.c = static_cast<int>(r.get<std::uint32_t>("dims"));
  const auto count = r.get<std::uint64_t>("phrase count");
  const std::size_t nbytes = (dims.cells() + 7) / 8;
  // Every phrase needs at least 6 header bytes plus its payload.
  if (count > bytes.size() / (6 + std::max<std::size_t>(nbytes, 1)) + 1) {
    throw ParseError("phrase count exceeds file size", r.pos());
  }

  std::vector<Phrase> phrases;
  phrases.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    Phrase ph{Pianoroll(dims), {}, 0};
    const auto id_len = r.get<std::uint16_t>("source id length");
    auto id = r.take(id_len, "source id");
    ph.source_id.assign(id.begin(), id.end());
    ph.bar_offset = r.get<std::uint32_t>("bar offset");
    auto packed = r.take(nbytes, "cell payload");
    auto cells = ph.roll.cells();
    for (std::size_t k = 0; k < cells.size(); ++k) cells[k] = (packed[k / 8] >> (7 - k % 8)) & 1;
    phrases.push_back(std::move(ph));
  }
  if (r.pos() != bytes.size()) throw ParseError("trailing bytes after last phrase", r.pos());
  return phrases;
}

void save_dataset(std::span<const Phrase> phrases, const std::string& path, Dims dims) {
  const auto bytes = encode_dataset(phrases, dims);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<Phrase> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

DatasetManifest build_manifest(std::span<const Phrase> phrases, Split split, Dims dims) {
  DatasetManifest m;
  m.split = split;
  m.dims = dims;
  m.phrase_count = phrases.size();
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    if (!m.sources.empty() && m.sources.back().source_id == phrases[i].source_id) {
      m.sources.back().end = i + 1;
      continue;
    }
    for (const auto& s : m.sources) {
      if (s.source_id == phrases[i].source_id) throw ContractError("build_manifest: source phrases not contiguous");
    }
    m.sources.push_back({phrases[i].source_id, i, i + 1});
  }
  return m;
}

bool manifest_is_consistent(const DatasetManifest& m) {
  std::uint64_t next = 0;
  for (const auto& s : m.sources) {
    if (s.begin != next || s.end <= s.begin) return false;
    next = s.end;
  }
  return next == m.phrase_count;
}

std::string format_manifests(const std::vector<DatasetManifest>& manifests) {
  std::ostringstream os;
  os << "m2m-manifest 1\n";
  for (const auto& m : manifests) {
    os << "split\t" << split_name(m.split) << '\t' << m.phrase_count << '\t' << m.dims.t << '\t' << m.dims.p
       << '\t' << m.dims.c << '\n';
    for (const auto& s : m.sources) os << "source\t" << s.begin << '\t' << s.end << '\t' << s.source_id << '\n';
  }
  return os.str();
}

std::vector<DatasetManifest> parse_manifests(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "m2m-manifest 1") throw ConfigError("not a manifest file");
  std::vector<DatasetManifest> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    std::getline(ls, kind, '\t');
    if (kind == "split") {
      DatasetManifest m;
      std::string name;
      std::getline(ls, name, '\t');
      m.split = parse_split(name);
      ls >> m.phrase_count >> m.dims.t >> m.dims.p >> m.dims.c;
      if (!ls) throw ConfigError("manifest line " + std::to_string(lineno) + ": malformed split record");
      out.push_back(std::move(m));
    } else if (kind == "source") {
      if (out.empty()) throw ConfigError("manifest line " + std::to_string(lineno) + ": source before split");
      SourceRange s;
      ls >> s.begin >> s.end;
      ls.get();
      std::getline(ls, s.source_id);
      if (!ls && !ls.eof()) throw ConfigError("manifest line " + std::to_string(lineno) + ": malformed source");
      out.back().sources.push_back(std::move(s));
    } else {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": unknown record '" + kind + "'");
    }
  }
  return out;
}

std::map<std::string, Split> assign_splits(std::vector<std::string> source_ids, std::array<int, 3> percentages,
                                           std::uint64_t seed) {
  if (percentages[0] + percentages[1] + percentages[2] != 100 || percentages[0] < 0 || percentages[1] < 0 ||
      percentages[2] < 0) {
    throw ConfigError("split percentages must be non-negative and sum to 100");
  }
  std::sort(source_ids.begin(), source_ids.end());
  source_ids.erase(std::unique(source_ids.begin(), source_ids.end()), source_ids.end());
  Rng rng = make_rng(seed, 0x5b1);
  for (std::size_t i = source_ids.size(); i > 1; --i) std::swap(source_ids[i - 1], source_ids[rng() % i]);

  const auto n = static_cast<long>(source_ids.size());
  auto share = [&](int pct) {
    long k = std::lround(static_cast<double>(n) * pct / 100.0);
    if (n >= 3 && pct > 0) k = std::max(k, 1L);
    return k;
  };
  const long n_valid = share(percentages[1]);
  const long n_test = share(percentages[2]);
  std::map<std::string, Split> out;
  for (long i = 0; i < n; ++i) {
    Split s = Split::Train;
    if (i < n_valid) s = Split::Valid;
    else if (i < n_valid + n_test) s = Split::Test;
    out[source_ids[static_cast<std::size_t>(i)]] = s;
  }
  return out;
}

}  // namespace m2m
