#pragma once

// Synthetic bimodal document data, the external manifest format, and class
// mappings between label vocabularies.
//
// Each class owns a visual template (a bright block in one cell of a 4 x 4
// grid) and a token unigram distribution (a private keyword range mixed with
// uniform background tokens). Label noise corrupts *evidence*: a corrupted
// sample keeps its true label but shows another class's template (image) or
// another class's keywords (text).
//
// Manifest format (UTF-8 CSV, header row required, exact column set):
//   id,image_path,tokens_path,label_name,split
// Paths are relative to the manifest's directory. split is train|val|test.
// Image files: 12-byte header of three little-endian uint32 (height, width,
// channels = 1), then height * width * channels little-endian float32 values
// in row-major order. Token files: one decimal token id per line.
//
// Mapping format: CSV with header source_name,target_name. The reserved
// target __exclude__ drops samples of that source class.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mfuse/error.hpp"
#include "mfuse/rng.hpp"
#include "mfuse/tensor.hpp"

namespace mfuse {

struct LabeledSample {
  std::string id;
  std::vector<double> image;  // image_size * image_size, row-major
  std::vector<int> tokens;    // seq_len ids
  int label = 0;
  bool image_corrupted = false;
  bool text_corrupted = false;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::size_t image_size = 32;
  std::size_t seq_len = 32;
  std::size_t vocab_size = 64;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t n_classes() const { return class_names.size(); }
  bool empty() const { return samples.empty(); }
};

struct Splits {
  Dataset train;
  std::optional<Dataset> val;
  Dataset test;
};

struct DatasetSpec {
  std::size_t n_classes = 4;
  std::vector<std::string> class_names;  // empty -> class0, class1, ...
  std::size_t train_per_class = 500;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 100;
  std::size_t image_size = 32;
  std::size_t seq_len = 32;
  std::size_t vocab_size = 64;
  double pixel_noise = 0.2;   // half-width of the uniform pixel noise
  double text_signal = 0.15;  // probability a token is drawn from the class keywords
  double image_label_noise = 0.0;
  double text_label_noise = 0.0;
  double class_overlap_rate = 0.0;  // classes 0 and 1 render a blended template
  std::uint64_t seed = 0;

  // Largest number of distinct visual templates the 4 x 4 grid supports.
  static constexpr std::size_t kMaxClasses = 16;

  std::vector<std::string> resolved_names() const {
    if (!class_names.empty()) return class_names;
    std::vector<std::string> names;
    for (std::size_t c = 0; c < n_classes; ++c) names.push_back("class" + std::to_string(c));
    return names;
  }

  void validate() const {
    if (n_classes < 2 || n_classes > kMaxClasses)
      throw InvalidConfig("n_classes must be in [2, " + std::to_string(kMaxClasses) + "]");
    if (!class_names.empty() && class_names.size() != n_classes)
      throw InvalidConfig("class_names must list exactly n_classes names");
    if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size())
      throw InvalidConfig("class_names must be distinct");
    if (train_per_class < 1 || test_per_class < 1)
      throw InvalidConfig("per-class counts too small to split: train and test need at least 1");
    // Cells of at least 6 pixels keep the template centre covered under jitter.
    if (image_size < 24 || image_size % 4) throw InvalidConfig("image_size must be a multiple of 4, >= 24");
    if (seq_len < 1) throw InvalidConfig("seq_len must be positive");
    if (vocab_size < 2 * n_classes) throw InvalidConfig("vocab_size must be at least 2 * n_classes");
    for (auto [name, v] : {std::pair{"image_label_noise", image_label_noise},
                           std::pair{"text_label_noise", text_label_noise},
                           std::pair{"class_overlap_rate", class_overlap_rate},
                           std::pair{"text_signal", text_signal}})
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidConfig(std::string(name) + " must lie in [0, 1]");
    if (!(pixel_noise >= 0.0 && pixel_noise < 0.25))
      throw InvalidConfig("pixel_noise must lie in [0, 0.25)");
  }
};

// ---------------------------------------------------------------------------
// Rendering

// Visual template t occupies grid cell t of a 4 x 4 layout; template 16 is a
// class-agnostic striped page used for unseen classes in transfer sets.
inline constexpr std::size_t kUnseenTemplate = DatasetSpec::kMaxClasses;

// The pixel at the centre of template t's block, covered for every jitter.
inline std::pair<std::size_t, std::size_t> template_pixel(std::size_t t, std::size_t image_size) {
  const std::size_t cell = image_size / 4;
  return {(t / 4) * cell + cell / 2, (t % 4) * cell + cell / 2};
}

namespace detail {

inline double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void draw_block(std::vector<double>& img, std::size_t size, std::size_t t, double amp, Rng& rng) {
  const std::size_t cell = size / 4;
  const long y0 = static_cast<long>((t / 4) * cell) + 1 + static_cast<long>(rng.index(3)) - 1;
  const long x0 = static_cast<long>((t % 4) * cell) + 1 + static_cast<long>(rng.index(3)) - 1;
  const long ext = static_cast<long>(cell) - 2;
  for (long y = std::max(0L, y0); y < std::min<long>(static_cast<long>(size), y0 + ext); ++y)
    for (long x = std::max(0L, x0); x < std::min<long>(static_cast<long>(size), x0 + ext); ++x)
      img[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] += amp;
}

inline void draw_unseen(std::vector<double>& img, std::size_t size, double amp, Rng& rng) {
  const std::size_t phase = rng.index(2);
  for (std::size_t y = 0; y < size; ++y)
    if ((y / 2 + phase) % 3 == 0)
      for (std::size_t x = 0; x < size; ++x) img[y * size + x] += 0.4 * amp;
}

// Class-independent clutter lines stay below the template decision margin.
inline void draw_clutter(std::vector<double>& img, std::size_t size, Rng& rng) {
  const std::size_t lines = rng.index(3);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t pos = rng.index(size);
    const bool horizontal = rng.bernoulli(0.5);
    for (std::size_t i = 0; i < size; ++i) {
      double& px = horizontal ? img[pos * size + i] : img[i * size + pos];
      px = std::max(px, 0.25);
    }
  }
}

inline std::size_t other_class(std::size_t c, std::size_t k, Rng& rng) {
  const std::size_t j = rng.index(k - 1);
  return j >= c ? j + 1 : j;
}

}  // namespace detail

// Renders one image showing the given templates (clutter, jitter and noise
// drawn from rng). Values are rounded to float32 precision so manifests
// round-trip exactly.
inline std::vector<double> render_image(const std::vector<std::size_t>& templates, std::size_t size,
                                        double pixel_noise, Rng& rng) {
  std::vector<double> img(size * size, 0.0);
  detail::draw_clutter(img, size, rng);
  const double amp = rng.uniform(0.7, 1.0) / static_cast<double>(templates.size());
  for (std::size_t t : templates) {
    if (t == kUnseenTemplate)
      detail::draw_unseen(img, size, amp * static_cast<double>(templates.size()), rng);
    else
      detail::draw_block(img, size, t, amp, rng);
  }
  for (double& v : img) v = detail::to_float_precision(v + rng.uniform(-pixel_noise, pixel_noise));
  return img;
}

// Keyword range of class c: [c * kw, (c + 1) * kw) with kw = vocab / (2 K).
inline std::vector<int> render_tokens(std::size_t keyword_class, std::size_t k, std::size_t vocab,
                                      std::size_t len, double signal, Rng& rng) {
  const std::size_t kw = std::max<std::size_t>(1, vocab / (2 * k));
  std::vector<int> tokens(len);
  for (int& t : tokens) {
    if (rng.bernoulli(signal))
      t = static_cast<int>(keyword_class * kw + rng.index(kw));
    else
      t = static_cast<int>(rng.index(vocab));
  }
  return tokens;
}

inline LabeledSample make_sample(const DatasetSpec& spec, std::size_t label, Rng& rng) {
  const std::size_t k = spec.n_classes;
  LabeledSample s;
  s.label = static_cast<int>(label);
  std::size_t visual = label;
  if (rng.bernoulli(spec.image_label_noise)) {
    visual = detail::other_class(label, k, rng);
    s.image_corrupted = true;
  }
  std::vector<std::size_t> templates{visual};
  if (visual < 2 && rng.bernoulli(spec.class_overlap_rate)) templates = {0, 1};
  s.image = render_image(templates, spec.image_size, spec.pixel_noise, rng);
  std::size_t textual = label;
  if (rng.bernoulli(spec.text_label_noise)) {
    textual = detail::other_class(label, k, rng);
    s.text_corrupted = true;
  }
  s.tokens = render_tokens(textual, k, spec.vocab_size, spec.seq_len, spec.text_signal, rng);
  return s;
}

inline Dataset empty_like(const DatasetSpec& spec) {
  Dataset d;
  d.class_names = spec.resolved_names();
  d.image_size = spec.image_size;
  d.seq_len = spec.seq_len;
  d.vocab_size = spec.vocab_size;
  return d;
}

inline Splits generate(const DatasetSpec& spec) {
  spec.validate();
  Splits out{empty_like(spec), std::nullopt, empty_like(spec)};
  Dataset val = empty_like(spec);
  const std::array<std::pair<const char*, std::size_t>, 3> plan{
      {{"train", spec.train_per_class}, {"val", spec.val_per_class}, {"test", spec.test_per_class}}};
  for (std::size_t si = 0; si < plan.size(); ++si) {
    Dataset& dst = si == 0 ? out.train : si == 1 ? val : out.test;
    Rng rng(derive_seed(spec.seed, 100 + si));
    for (std::size_t c = 0; c < spec.n_classes; ++c)
      for (std::size_t i = 0; i < plan[si].second; ++i) dst.samples.push_back(make_sample(spec, c, rng));
    rng.shuffle(dst.samples);
    for (std::size_t i = 0; i < dst.samples.size(); ++i) {
      std::ostringstream id;
      id << plan[si].first << '-' << std::setw(6) << std::setfill('0') << i;
      dst.samples[i].id = id.str();
    }
  }
  if (!val.empty()) out.val = std::move(val);
  return out;
}

// ---------------------------------------------------------------------------
// Class mappings

inline constexpr const char* kExcludeTarget = "__exclude__";

struct ClassMapping {
  std::vector<std::pair<std::string, std::string>> pairs;  // source -> target, in file order
  std::vector<std::string> excluded;                         // sources dropped entirely

  void validate() const {
    std::set<std::string> sources, targets;
    for (const auto& [s, t] : pairs) {
      if (!sources.insert(s).second) throw ValidationError("mapping: source '" + s + "' listed twice");
      if (!targets.insert(t).second) throw ValidationError("mapping: target '" + t + "' is not injective");
    }
    for (const auto& e : excluded)
      if (!sources.insert(e).second)
        throw ValidationError("mapping: source '" + e + "' is both mapped and excluded");
  }

  std::optional<std::string> target_of(const std::string& source) const {
    for (const auto& [s, t] : pairs)
      if (s == source) return t;
    return std::nullopt;
  }
  bool is_excluded(const std::string& source) const {
    return std::find(excluded.begin(), excluded.end(), source) != excluded.end();
  }

  static ClassMapping identity(const std::vector<std::string>& names) {
    ClassMapping m;
    for (const auto& n : names) m.pairs.emplace_back(n, n);
    return m;
  }
};

struct MappedLabels {
  std::vector<std::string> labels;  // target names for kept samples, in order
  std::vector<bool> kept;           // one flag per input label
};

inline MappedLabels apply_mapping(const std::vector<std::string>& labels, const ClassMapping& mapping) {
  MappedLabels out;
  out.kept.reserve(labels.size());
  for (const auto& l : labels) {
    if (auto t = mapping.target_of(l)) {
      out.labels.push_back(*t);
      out.kept.push_back(true);
    } else if (mapping.is_excluded(l)) {
      out.kept.push_back(false);
    } else {
      throw ValidationError("mapping: label '" + l + "' is neither mapped nor excluded");
    }
  }
  return out;
}

// The sixteen RVL-CDIP categories.
inline std::vector<std::string> rvl_cdip_class_names() {
  return {"Advertisement", "Budget",        "Email",         "File folder",
          "Form",          "Handwritten",   "Invoice",       "Letter",
          "Memo",          "News article",  "Presentation",  "Questionnaire",
          "Resume",        "Scientific publication",         "Scientific report",
          "Specification"};
}

// The ten Tobacco-3482 categories.
inline std::vector<std::string> tobacco3482_class_names() {
  return {"ADVE", "Email", "Form", "Letter", "Memo", "News", "Note", "Report", "Resume", "Scientific"};
}

// The nine shared categories, RVL-CDIP name -> Tobacco-3482 name.
inline std::vector<std::pair<std::string, std::string>> shared_document_classes() {
  return {{"Advertisement", "ADVE"},  {"Email", "Email"},   {"Form", "Form"},
          {"Letter", "Letter"},       {"Memo", "Memo"},     {"News article", "News"},
          {"Resume", "Resume"},       {"Scientific publication", "Scientific"},
          {"Scientific report", "Report"}};
}

inline ClassMapping rvl_to_tobacco_mapping() {
  ClassMapping m;
  m.pairs = shared_document_classes();
  for (const auto& n : rvl_cdip_class_names())
    if (!m.target_of(n)) m.excluded.push_back(n);
  return m;
}

inline ClassMapping tobacco_to_rvl_mapping() {
  ClassMapping m;
  for (const auto& [rvl, tob] : shared_document_classes()) m.pairs.emplace_back(tob, rvl);
  m.excluded.push_back("Note");
  return m;
}

// ---------------------------------------------------------------------------
// CSV helpers

namespace csv {

inline std::vector<std::string> split_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!cur.empty()) throw ParseError("stray quote inside field", line_no);
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(const std::string& f) {
  if (f.find_first_of(",\"\n") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Reads all rows; strips a trailing '\r' and skips blank lines. Returns
// (line number, fields) pairs, header included.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_rows(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open '" + p.string() + "'");
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (no == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (line.empty()) continue;
    rows.emplace_back(no, split_line(line, no));
  }
  return rows;
}

inline void require_header(const std::vector<std::string>& got, const std::vector<std::string>& want,
                           const std::string& what) {
  for (const auto& g : got)
    if (std::find(want.begin(), want.end(), g) == want.end())
      throw ParseError(what + ": unknown column '" + g + "'", 1);
  for (const auto& w : want)
    if (std::find(got.begin(), got.end(), w) == got.end())
      throw ParseError(what + ": missing column '" + w + "'", 1);
  if (got.size() != want.size()) throw ParseError(what + ": duplicate columns", 1);
}

}  // namespace csv

inline ClassMapping load_mapping(const std::filesystem::path& path) {
  const auto rows = csv::read_rows(path);
  if (rows.empty()) throw ParseError("mapping: missing header", 1);
  csv::require_header(rows[0].second, {"source_name", "target_name"}, "mapping");
  const std::size_t si = std::find(rows[0].second.begin(), rows[0].second.end(), "source_name") - rows[0].second.begin();
  ClassMapping m;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& [no, f] = rows[r];
    if (f.size() != 2) throw ParseError("mapping: expected 2 fields, got " + std::to_string(f.size()), no);
    const std::string& src = f[si];
    const std::string& dst = f[1 - si];
    if (src.empty() || dst.empty()) throw ParseError("mapping: empty class name", no);
    if (dst == kExcludeTarget)
      m.excluded.push_back(src);
    else
      m.pairs.emplace_back(src, dst);
  }
  m.validate();
  return m;
}

inline void write_mapping(const ClassMapping& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << "source_name,target_name\n";
  for (const auto& [s, t] : m.pairs) out << csv::quote(s) << ',' << csv::quote(t) << '\n';
  for (const auto& e : m.excluded) out << csv::quote(e) << ',' << kExcludeTarget << '\n';
}

// ---------------------------------------------------------------------------
// Binary helpers (explicit little-endian packing).

namespace bin {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xFFFFFFFFu));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ValidationError("unexpected end of binary file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  return lo | (static_cast<std::uint64_t>(get_u32(is)) << 32);
}

inline double get_f32(std::istream& is) { return static_cast<double>(std::bit_cast<float>(get_u32(is))); }

}  // namespace bin

inline void write_image_file(const std::filesystem::path& p, const std::vector<double>& img, std::size_t h,
                             std::size_t w) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + p.string() + "'");
  bin::put_u32(out, static_cast<std::uint32_t>(h));
  bin::put_u32(out, static_cast<std::uint32_t>(w));
  bin::put_u32(out, 1);
  for (double v : img) bin::put_f32(out, v);
}

struct ImageFile {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> values;
};

inline ImageFile read_image_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot open image '" + p.string() + "'");
  ImageFile f;
  f.height = bin::get_u32(in);
  f.width = bin::get_u32(in);
  f.channels = bin::get_u32(in);
  const std::size_t n = f.height * f.width * f.channels;
  if (n == 0 || n > (1u << 26)) throw ValidationError("image '" + p.string() + "': implausible dimensions");
  f.values.resize(n);
  for (double& v : f.values) v = bin::get_f32(in);
  if (in.peek() != std::char_traits<char>::eof())
    throw ValidationError("image '" + p.string() + "': trailing bytes after payload");
  return f;
}

inline std::vector<int> read_token_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open tokens '" + p.string() + "'");
  std::vector<int> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(line, &used);
    } catch (const std::exception&) {
      throw ParseError("tokens '" + p.string() + "': not an integer", no);
    }
    if (used != line.size()) throw ParseError("tokens '" + p.string() + "': not an integer", no);
    out.push_back(v);
  }
  return out;
}

inline const std::vector<std::string>& manifest_columns() {
  static const std::vector<std::string> cols{"id", "image_path", "tokens_path", "label_name", "split"};
  return cols;
}

// Writes every split under dir: manifest.csv plus images/ and tokens/.
inline std::filesystem::path write_manifest(const Splits& splits, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "tokens");
  const fs::path manifest = dir / "manifest.csv";
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + manifest.string() + "'");
  out << "id,image_path,tokens_path,label_name,split\n";
  auto emit = [&](const Dataset& d, const char* split) {
    for (const auto& s : d.samples) {
      const std::string img = "images/" + s.id + ".f32";
      const std::string tok = "tokens/" + s.id + ".txt";
      write_image_file(dir / img, s.image, d.image_size, d.image_size);
      std::ofstream t(dir / tok, std::ios::binary);
      for (int v : s.tokens) t << v << '\n';
      out << csv::quote(s.id) << ',' << img << ',' << tok << ',' << csv::quote(d.class_names.at(s.label)) << ','
          << split << '\n';
    }
  };
  emit(splits.train, "train");
  if (splits.val) emit(*splits.val, "val");
  emit(splits.test, "test");
  return manifest;
}

struct ManifestOptions {
  std::vector<std::string> class_names;  // empty -> sorted distinct label names
  std::size_t vocab_size = 64;
  std::optional<std::size_t> seq_len;     // empty -> take from the first sample
  std::optional<std::size_t> image_size;  // empty -> take from the first sample
};

inline Splits load_manifest(const std::filesystem::path& path, const ManifestOptions& opt = {}) {
  const auto rows = csv::read_rows(path);
  if (rows.empty()) throw ParseError("manifest: missing header", 1);
  const auto& header = rows[0].second;
  csv::require_header(header, manifest_columns(), "manifest");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;

  struct Row {
    std::size_t line;
    std::vector<std::string> f;
  };
  std::vector<Row> body;
  std::set<std::string> names;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& [no, f] = rows[r];
    if (f.size() != header.size())
      throw ParseError("manifest: expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(f.size()),
                       no);
    for (const char* c : {"id", "image_path", "tokens_path", "label_name"})
      if (f[col[c]].empty()) throw ParseError(std::string("manifest: empty ") + c, no);
    const std::string& split = f[col["split"]];
    if (split != "train" && split != "val" && split != "test")
      throw ParseError("manifest: split must be train, val or test (got '" + split + "')", no);
    names.insert(f[col["label_name"]]);
    body.push_back({no, f});
  }

  const std::vector<std::string> class_names =
      opt.class_names.empty() ? std::vector<std::string>(names.begin(), names.end()) : opt.class_names;
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < class_names.size(); ++i) index[class_names[i]] = static_cast<int>(i);

  Dataset proto;
  proto.class_names = class_names;
  proto.vocab_size = opt.vocab_size;
  Splits out{proto, std::nullopt, proto};
  Dataset val = proto;
  bool shape_known = false;
  std::set<std::string> ids;
  const std::filesystem::path base = path.parent_path();
  for (const Row& row : body) {
    LabeledSample s;
    s.id = row.f[col["id"]];
    if (!ids.insert(s.id).second) throw ValidationError("manifest line " + std::to_string(row.line) + ": duplicate id '" + s.id + "'");
    const std::string& label = row.f[col["label_name"]];
    const auto it = index.find(label);
    if (it == index.end())
      throw ValidationError("manifest line " + std::to_string(row.line) + ": label '" + label +
                            "' is not a known class");
    s.label = it->second;
    const ImageFile img = read_image_file(base / row.f[col["image_path"]]);
    if (img.height != img.width || img.channels != 1)
      throw ValidationError("manifest line " + std::to_string(row.line) + ": images must be square, single-channel");
    s.image = img.values;
    s.tokens = read_token_file(base / row.f[col["tokens_path"]]);
    for (int t : s.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= opt.vocab_size)
        throw ValidationError("manifest line " + std::to_string(row.line) + ": token id " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(opt.vocab_size));
    if (!shape_known) {
      const std::size_t isz = opt.image_size.value_or(img.height);
      const std::size_t slen = opt.seq_len.value_or(s.tokens.size());
      for (Dataset* d : {&out.train, &val, &out.test}) {
        d->image_size = isz;
        d->seq_len = slen;
      }
      shape_known = true;
    }
    if (img.height != out.train.image_size)
      throw ValidationError("manifest line " + std::to_string(row.line) + ": image is " + std::to_string(img.height) +
                            "x" + std::to_string(img.width) + ", expected " + std::to_string(out.train.image_size));
    if (s.tokens.size() != out.train.seq_len)
      throw ValidationError("manifest line " + std::to_string(row.line) + ": token sequence has length " +
                            std::to_string(s.tokens.size()) + ", expected " + std::to_string(out.train.seq_len));
    const std::string& split = row.f[col["split"]];
    (split == "train" ? out.train : split == "val" ? val : out.test).samples.push_back(std::move(s));
  }
  if (!val.empty()) out.val = std::move(val);
  return out;
}

// Sample content hash (FNV-1a over label, pixels and tokens).
inline std::uint64_t sample_hash(const LabeledSample& s) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  mix(&s.label, sizeof s.label);
  mix(s.image.data(), s.image.size() * sizeof(double));
  mix(s.tokens.data(), s.tokens.size() * sizeof(int));
  return h;
}

// Transfer set for inter-dataset evaluation: samples labelled in a foreign
// vocabulary. Sources mapped onto a training class are rendered from that
// class's template and keywords; excluded sources use the unseen template and
// background-only text.
inline Dataset generate_transfer_set(const DatasetSpec& train_spec, const std::vector<std::string>& source_names,
                                     const ClassMapping& mapping, std::size_t per_class, std::uint64_t seed) {
  train_spec.validate();
  mapping.validate();
  const auto train_names = train_spec.resolved_names();
  Dataset d = empty_like(train_spec);
  d.class_names = source_names;
  Rng rng(derive_seed(seed, 200));
  for (std::size_t c = 0; c < source_names.size(); ++c) {
    std::optional<std::size_t> target;
    if (auto t = mapping.target_of(source_names[c])) {
      const auto it = std::find(train_names.begin(), train_names.end(), *t);
      if (it == train_names.end())
        throw ValidationError("transfer set: target '" + *t + "' is not a training class");
      target = static_cast<std::size_t>(it - train_names.begin());
    } else if (!mapping.is_excluded(source_names[c])) {
      throw ValidationError("transfer set: source '" + source_names[c] + "' is neither mapped nor excluded");
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledSample s;
      s.label = static_cast<int>(c);
      if (target) {
        s.image = render_image({*target}, train_spec.image_size, train_spec.pixel_noise, rng);
        s.tokens = render_tokens(*target, train_spec.n_classes, train_spec.vocab_size, train_spec.seq_len,
                                 train_spec.text_signal, rng);
      } else {
        s.image = render_image({kUnseenTemplate}, train_spec.image_size, train_spec.pixel_noise, rng);
        s.tokens = render_tokens(0, train_spec.n_classes, train_spec.vocab_size, train_spec.seq_len, 0.0, rng);
      }
      d.samples.push_back(std::move(s));
    }
  }
  rng.shuffle(d.samples);
  for (std::size_t i = 0; i < d.samples.size(); ++i) d.samples[i].id = "transfer-" + std::to_string(i);
  return d;
}

}  // namespace mfuse
