#pragma once

// Synthetic hierarchical-document corpus: nested page/paragraph/line/word
// ground truth with controllable per-granularity annotation dropout, plus
// the dataset directory format (index.jsonl + images/*.png) and the
// prediction-file schema shared by inference and evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "textdet/geometry.hpp"
#include "textdet/png_io.hpp"
#include "textdet/rng.hpp"

namespace textdet {

enum class GranularityLevel : int { word = 0, line = 1, para = 2, page = 3 };

inline constexpr std::array<GranularityLevel, 4> kGranularities = {
    GranularityLevel::word, GranularityLevel::line, GranularityLevel::para,
    GranularityLevel::page};

inline const char* granularity_name(GranularityLevel g) {
  switch (g) {
    case GranularityLevel::word: return "word";
    case GranularityLevel::line: return "line";
    case GranularityLevel::para: return "para";
    case GranularityLevel::page: return "page";
  }
  return "?";
}

inline GranularityLevel parse_granularity(const std::string& s) {
  for (auto g : kGranularities)
    if (s == granularity_name(g)) return g;
  throw validation_error("unknown granularity: \"" + s + "\"");
}

// Per-granularity annotation-availability indicators.
struct GranularityFlags {
  std::array<uint8_t, 4> annotated = {0, 0, 0, 0};

  uint8_t& operator[](GranularityLevel g) { return annotated[static_cast<int>(g)]; }
  uint8_t operator[](GranularityLevel g) const { return annotated[static_cast<int>(g)]; }
  int count() const { return annotated[0] + annotated[1] + annotated[2] + annotated[3]; }
  static GranularityFlags all() { return {{1, 1, 1, 1}}; }
};

struct TextInstanceGT {
  GranularityLevel granularity = GranularityLevel::word;
  int class_id = 0;  // 0 for word/line/page; 0..P-1 for para
  Polygon polygon;   // pixel coordinates

  AABox bbox() const { return polygon_to_aabox(polygon); }
};

struct SampleRecord {
  std::string id;
  std::string image;  // path relative to the dataset directory
  int width = 0;
  int height = 0;
  GranularityFlags flags;
  std::vector<TextInstanceGT> instances;  // only for annotated granularities
};

struct Range {
  double lo = 0.0, hi = 0.0;
};
struct IntRange {
  int lo = 0, hi = 0;
};

struct CorpusConfig {
  int image_size = 256;
  Range page_margin = {10, 26};       // pixels
  Range page_perspective = {0.0, 0.05};  // horizontal shear as fraction of image size
  IntRange paras_per_page = {1, 3};
  IntRange lines_per_para = {1, 4};
  IntRange words_per_line = {2, 6};
  Range curvature = {0.0, 2.5};  // sine amplitude of line baselines, pixels
  int num_para_classes = 5;
  std::array<double, 4> keep_prob = {1.0, 1.0, 1.0, 1.0};  // word, line, para, page
  uint64_t seed = 0;

  void validate() const {
    auto chk_range = [](const Range& r, const char* name) {
      if (!(r.lo <= r.hi) || r.lo < 0) throw validation_error(std::string("corpus config: bad range ") + name);
    };
    auto chk_irange = [](const IntRange& r, const char* name) {
      if (r.lo > r.hi || r.lo < 1) throw validation_error(std::string("corpus config: bad range ") + name);
    };
    if (image_size < 64 || image_size % 32 != 0)
      throw validation_error("corpus config: image_size must be >= 64 and divisible by 32");
    chk_range(page_margin, "page_margin");
    chk_range(page_perspective, "page_perspective");
    chk_irange(paras_per_page, "paras_per_page");
    chk_irange(lines_per_para, "lines_per_para");
    chk_irange(words_per_line, "words_per_line");
    chk_range(curvature, "curvature");
    if (num_para_classes < 1) throw validation_error("corpus config: num_para_classes must be >= 1");
    for (double p : keep_prob)
      if (p < 0.0 || p > 1.0) throw validation_error("corpus config: keep probabilities must lie in [0,1]");
  }
};

inline CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  auto range = [&](const char* key, Range def) {
    if (!j.contains(key)) return def;
    return Range{j.at(key).at(0).get<double>(), j.at(key).at(1).get<double>()};
  };
  auto irange = [&](const char* key, IntRange def) {
    if (!j.contains(key)) return def;
    return IntRange{j.at(key).at(0).get<int>(), j.at(key).at(1).get<int>()};
  };
  c.image_size = j.value("image_size", c.image_size);
  c.page_margin = range("page_margin", c.page_margin);
  c.page_perspective = range("page_perspective", c.page_perspective);
  c.paras_per_page = irange("paras_per_page", c.paras_per_page);
  c.lines_per_para = irange("lines_per_para", c.lines_per_para);
  c.words_per_line = irange("words_per_line", c.words_per_line);
  c.curvature = range("curvature", c.curvature);
  c.num_para_classes = j.value("num_para_classes", c.num_para_classes);
  if (j.contains("keep_prob")) {
    const auto& kp = j.at("keep_prob");
    for (auto g : kGranularities)
      c.keep_prob[static_cast<int>(g)] = kp.value(granularity_name(g), 1.0);
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

namespace detail {

inline void fill_polygon_into(Image& img, const Polygon& p, uint8_t shade) {
  const BitGrid g = fill_polygon_grid(p, img.height, img.width, 0.0, 0.0, 1.0, 1.0);
  const int wpr = g.words_per_row();
  for (int r = 0; r < img.height; ++r) {
    const uint64_t* row = g.words.data() + static_cast<size_t>(r) * wpr;
    for (int c = 0; c < img.width; ++c)
      if (row[c >> 6] & (1ULL << (c & 63))) img.at(r, c) = shade;
  }
}

inline uint8_t para_tint(int class_id, int num_classes) {
  if (num_classes <= 1) return 200;
  return static_cast<uint8_t>(206 - 56 * class_id / (num_classes - 1));
}

// Curved band polygon: top edge left-to-right, bottom edge right-to-left,
// following baseline y(x) = yc + amp * sin(2*pi*(x-x0)/wavelen + phase).
inline Polygon band_polygon(double x0, double x1, double yc, double half_h, double amp,
                            double wavelen, double phase, int samples) {
  Polygon p;
  p.reserve(static_cast<size_t>(2 * samples));
  for (int i = 0; i < samples; ++i) {
    const double x = x0 + (x1 - x0) * i / (samples - 1);
    const double y = yc + amp * std::sin(2.0 * std::numbers::pi * (x - x0) / wavelen + phase);
    p.push_back({x, y - half_h});
  }
  for (int i = samples - 1; i >= 0; --i) {
    const double x = x0 + (x1 - x0) * i / (samples - 1);
    const double y = yc + amp * std::sin(2.0 * std::numbers::pi * (x - x0) / wavelen + phase);
    p.push_back({x, y + half_h});
  }
  return p;
}

}  // namespace detail

// Deterministic in (cfg.seed, index). Throws validation_error naming the
// violated constraint when the configured ranges cannot fit.
inline std::pair<SampleRecord, Image> generate_sample(const CorpusConfig& cfg, int index) {
  cfg.validate();
  Rng master(cfg.seed);
  Rng rng = master.child(static_cast<uint64_t>(index) + 1);
  const int S = cfg.image_size;

  SampleRecord rec;
  {
    std::ostringstream oss;
    oss << "sample_" << std::setw(6) << std::setfill('0') << index;
    rec.id = oss.str();
  }
  rec.image = "images/" + rec.id + ".png";
  rec.width = S;
  rec.height = S;

  Image img;
  img.width = S;
  img.height = S;
  img.channels = 1;
  img.pixels.assign(static_cast<size_t>(S) * S, 238);

  // page quad: margin rectangle with inward corner jitter plus a horizontal shear
  const double margin = rng.uniform(cfg.page_margin.lo, cfg.page_margin.hi);
  const double shear = rng.uniform(cfg.page_perspective.lo, cfg.page_perspective.hi) * S *
                       (rng.bernoulli(0.5) ? 1.0 : -1.0);
  auto jit = [&] { return rng.uniform(0.0, 0.4 * margin); };
  Point2 tl{margin + jit() + shear / 2, margin + jit()};
  Point2 tr{S - margin - jit() + shear / 2, margin + jit()};
  Point2 br{S - margin - jit() - shear / 2, S - margin - jit()};
  Point2 bl{margin + jit() - shear / 2, S - margin - jit()};
  auto clampf = [&](Point2& p) {
    p.x = std::clamp(p.x, 2.0, S - 2.0);
    p.y = std::clamp(p.y, 2.0, S - 2.0);
  };
  clampf(tl); clampf(tr); clampf(br); clampf(bl);
  const Polygon page_poly = {tl, tr, br, bl};

  // inner content rectangle, strictly inside the page quad
  double gap = 4.0;
  double cx0 = std::max(tl.x, bl.x) + gap;
  double cx1 = std::min(tr.x, br.x) - gap;
  double cy0 = std::max(tl.y, tr.y) + gap;
  double cy1 = std::min(bl.y, br.y) - gap;
  if (cx1 - cx0 < 24 || cy1 - cy0 < 16)
    throw validation_error("generate_sample: page margins leave no room for content");

  detail::fill_polygon_into(img, page_poly, 215);

  std::vector<TextInstanceGT> all;
  all.push_back({GranularityLevel::page, 0, page_poly});

  // paragraphs: vertical bands of the content rect
  const int n_para = rng.uniform_range(cfg.paras_per_page.lo, cfg.paras_per_page.hi);
  const double para_gap = 4.0;
  const double min_line_h = 9.0;
  const double line_gap = 3.0;
  const double avail_h = (cy1 - cy0) - (n_para - 1) * para_gap;
  const double min_para_h = min_line_h * cfg.lines_per_para.lo +
                            line_gap * (cfg.lines_per_para.lo - 1) + 4.0;
  if (avail_h < n_para * min_para_h)
    throw validation_error(
        "generate_sample: paragraphs_per_page x lines_per_para do not fit in the page height");

  std::vector<double> pw(n_para);
  double pw_sum = 0;
  for (auto& w : pw) pw_sum += (w = rng.uniform(0.7, 1.3));
  double ycur = cy0;
  for (int pi = 0; pi < n_para; ++pi) {
    const double ph = std::max(min_para_h, avail_h * pw[pi] / pw_sum);
    const double py0 = ycur;
    const double py1 = std::min(py0 + ph, cy1);
    ycur = py1 + para_gap;
    const double inset_l = rng.uniform(0.0, 0.08 * (cx1 - cx0));
    const double inset_r = rng.uniform(0.0, 0.08 * (cx1 - cx0));
    const double px0 = cx0 + inset_l, px1 = cx1 - inset_r;
    const int cls = rng.uniform_int(cfg.num_para_classes);
    const Polygon para_poly = {{px0, py0}, {px1, py0}, {px1, py1}, {px0, py1}};
    detail::fill_polygon_into(img, para_poly, detail::para_tint(cls, cfg.num_para_classes));
    all.push_back({GranularityLevel::para, cls, para_poly});

    // lines: horizontal bands inside the paragraph
    const double pad = 2.0;
    const double usable = (py1 - py0) - 2 * pad;
    const int max_lines = static_cast<int>((usable + line_gap) / (min_line_h + line_gap));
    if (max_lines < cfg.lines_per_para.lo)
      throw validation_error("generate_sample: lines_per_para does not fit in paragraph height");
    const int n_line = rng.uniform_range(cfg.lines_per_para.lo,
                                         std::min(cfg.lines_per_para.hi, max_lines));
    const double band_h = (usable - (n_line - 1) * line_gap) / n_line;
    for (int li = 0; li < n_line; ++li) {
      const double band_top = py0 + pad + li * (band_h + line_gap);
      const double yc = band_top + band_h / 2;
      double amp = rng.uniform(cfg.curvature.lo, cfg.curvature.hi);
      amp = std::min(amp, 0.15 * band_h);
      const double wavelen = rng.uniform(0.8, 1.6) * (px1 - px0);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double lx0 = px0 + 2.0 + rng.uniform(0.0, 0.05 * (px1 - px0));
      const double lx1 = px1 - 2.0 - rng.uniform(0.0, 0.05 * (px1 - px0));
      const double line_half = 0.39 * band_h;
      all.push_back({GranularityLevel::line, 0,
                     detail::band_polygon(lx0, lx1, yc, line_half, amp, wavelen, phase, 8)});

      // words: segments along the line band
      const double word_gap = 3.0;
      const double min_word_w = 7.0;
      const double line_w = lx1 - lx0;
      const int capacity = static_cast<int>((line_w + word_gap) / (min_word_w + word_gap));
      if (capacity < cfg.words_per_line.lo)
        throw validation_error("generate_sample: words_per_line is wider than the line");
      const int n_word = rng.uniform_range(cfg.words_per_line.lo,
                                           std::min(cfg.words_per_line.hi, capacity));
      std::vector<double> ww(n_word);
      double ww_sum = 0;
      for (auto& w : ww) ww_sum += (w = rng.uniform(0.7, 1.6));
      const double total_word_w = line_w - (n_word - 1) * word_gap;
      double xcur = lx0;
      const double word_half = 0.26 * band_h;
      for (int wi = 0; wi < n_word; ++wi) {
        const double w = std::max(4.0, total_word_w * ww[wi] / ww_sum);
        const double wx1 = std::min(xcur + w, lx1);
        const uint8_t shade = static_cast<uint8_t>(35 + rng.uniform_int(55));
        // word follows the same baseline as its line, so it nests inside it
        const double rel_phase = phase + 2.0 * std::numbers::pi * (xcur - lx0) / wavelen;
        const Polygon wp =
            detail::band_polygon(xcur, wx1, yc, word_half, amp, wavelen, rel_phase, 5);
        detail::fill_polygon_into(img, wp, shade);
        all.push_back({GranularityLevel::word, 0, wp});
        xcur = wx1 + word_gap;
      }
    }
  }

  // mild deterministic pixel noise
  for (auto& px : img.pixels) {
    const int n = rng.uniform_int(7) - 3;
    px = static_cast<uint8_t>(std::clamp(static_cast<int>(px) + n, 0, 255));
  }

  // annotation dropout
  for (auto g : kGranularities)
    rec.flags[g] = rng.bernoulli(cfg.keep_prob[static_cast<int>(g)]) ? 1 : 0;
  for (auto& inst : all)
    if (rec.flags[inst.granularity]) rec.instances.push_back(std::move(inst));

  return {std::move(rec), std::move(img)};
}

// ---------------------------------------------------------------------------
// Dataset files

inline nlohmann::ordered_json record_to_json(const SampleRecord& rec) {
  nlohmann::ordered_json j;
  j["id"] = rec.id;
  j["image"] = rec.image;
  j["width"] = rec.width;
  j["height"] = rec.height;
  nlohmann::ordered_json flags;
  for (auto g : kGranularities) flags[granularity_name(g)] = static_cast<int>(rec.flags[g]);
  j["flags"] = flags;
  nlohmann::ordered_json insts = nlohmann::ordered_json::array();
  for (const auto& inst : rec.instances) {
    nlohmann::ordered_json ji;
    ji["granularity"] = granularity_name(inst.granularity);
    ji["class_id"] = inst.class_id;
    nlohmann::ordered_json poly = nlohmann::ordered_json::array();
    for (const auto& v : inst.polygon) poly.push_back({v.x, v.y});
    ji["polygon"] = poly;
    insts.push_back(ji);
  }
  j["instances"] = insts;
  return j;
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord rec;
  for (const char* key : {"id", "image", "width", "height", "flags", "instances"})
    if (!j.contains(key)) throw validation_error(std::string("missing field \"") + key + "\"");
  rec.id = j.at("id").get<std::string>();
  rec.image = j.at("image").get<std::string>();
  rec.width = j.at("width").get<int>();
  rec.height = j.at("height").get<int>();
  for (auto g : kGranularities)
    rec.flags[g] = static_cast<uint8_t>(j.at("flags").value(granularity_name(g), 0));
  for (const auto& ji : j.at("instances")) {
    TextInstanceGT inst;
    inst.granularity = parse_granularity(ji.at("granularity").get<std::string>());
    inst.class_id = ji.value("class_id", 0);
    for (const auto& v : ji.at("polygon")) {
      const double x = v.at(0).get<double>(), y = v.at(1).get<double>();
      if (!std::isfinite(x) || !std::isfinite(y))
        throw validation_error("non-finite polygon coordinate");
      inst.polygon.push_back({x, y});
    }
    if (inst.polygon.size() < 3) throw validation_error("polygon with fewer than 3 vertices");
    if (!rec.flags[inst.granularity])
      throw validation_error(std::string("instance at granularity \"") +
                             granularity_name(inst.granularity) + "\" but flag is 0");
    rec.instances.push_back(std::move(inst));
  }
  return rec;
}

inline void write_dataset(const std::string& dir, const std::vector<SampleRecord>& records,
                          const std::vector<Image>& images) {
  if (records.size() != images.size())
    throw validation_error("write_dataset: record/image count mismatch");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream idx(fs::path(dir) / "index.jsonl");
  if (!idx) throw std::runtime_error("write_dataset: cannot open index.jsonl in " + dir);
  for (size_t i = 0; i < records.size(); ++i) {
    idx << record_to_json(records[i]).dump() << "\n";
    write_png_file((fs::path(dir) / records[i].image).string(), images[i]);
  }
  if (!idx) throw std::runtime_error("write_dataset: index write failed");
}

inline std::vector<SampleRecord> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path idx_path = fs::path(dir) / "index.jsonl";
  std::ifstream idx(idx_path);
  if (!idx) throw std::runtime_error("read_dataset: cannot open " + idx_path.string());
  std::vector<SampleRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(idx, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw validation_error(idx_path.string() + " line " + std::to_string(lineno) + ": " +
                             e.what());
    }
  }
  return out;
}

inline Image load_sample_image(const std::string& dir, const SampleRecord& rec) {
  return read_png_file((std::filesystem::path(dir) / rec.image).string());
}

// Horizontal mirror of both raster and annotations; flags unchanged.
inline void flip_augment(SampleRecord& rec, Image& img) {
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width / 2; ++c) {
      for (int ch = 0; ch < img.channels; ++ch)
        std::swap(img.at(r, c, ch), img.at(r, img.width - 1 - c, ch));
    }
  }
  for (auto& inst : rec.instances)
    for (auto& v : inst.polygon) v.x = rec.width - v.x;
}

// ---------------------------------------------------------------------------
// Prediction files (dataset schema plus "score" and optional "mask_rle")

struct PredInstance {
  GranularityLevel granularity = GranularityLevel::word;
  int class_id = 0;
  Polygon polygon;
  double score = 0.0;
  std::optional<std::vector<int>> mask_rle;  // row-major, starts with the zero-run
};

struct PredRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<PredInstance> instances;
};

// Row-major run-length encoding of a thresholded mask; counts alternate
// starting with the zero-run and sum to height*width.
inline std::vector<int> rle_encode(const RasterMask& m) {
  std::vector<int> runs;
  bool cur = false;
  int count = 0;
  for (float v : m.values) {
    const bool bit = v >= 0.5f;
    if (bit == cur) {
      ++count;
    } else {
      runs.push_back(count);
      cur = bit;
      count = 1;
    }
  }
  runs.push_back(count);
  return runs;
}

inline RasterMask rle_decode(const std::vector<int>& runs, int h, int w) {
  RasterMask m{h, w, std::vector<float>(static_cast<size_t>(h) * w, 0.0f)};
  size_t pos = 0;
  bool cur = false;
  for (int run : runs) {
    if (run < 0 || pos + run > m.values.size()) throw validation_error("rle_decode: bad run length");
    if (cur) std::fill(m.values.begin() + pos, m.values.begin() + pos + run, 1.0f);
    pos += run;
    cur = !cur;
  }
  if (pos != m.values.size()) throw validation_error("rle_decode: runs do not cover the mask");
  return m;
}

inline void write_predictions(const std::string& path, const std::vector<PredRecord>& preds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& pr : preds) {
    nlohmann::ordered_json j;
    j["id"] = pr.id;
    j["width"] = pr.width;
    j["height"] = pr.height;
    nlohmann::ordered_json insts = nlohmann::ordered_json::array();
    for (const auto& inst : pr.instances) {
      nlohmann::ordered_json ji;
      ji["granularity"] = granularity_name(inst.granularity);
      ji["class_id"] = inst.class_id;
      nlohmann::ordered_json poly = nlohmann::ordered_json::array();
      for (const auto& v : inst.polygon) poly.push_back({v.x, v.y});
      ji["polygon"] = poly;
      ji["score"] = inst.score;
      if (inst.mask_rle) ji["mask_rle"] = *inst.mask_rle;
      insts.push_back(ji);
    }
    j["instances"] = insts;
    f << j.dump() << "\n";
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<PredRecord> read_predictions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<PredRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PredRecord pr;
      pr.id = j.at("id").get<std::string>();
      pr.width = j.value("width", 0);
      pr.height = j.value("height", 0);
      for (const auto& ji : j.at("instances")) {
        PredInstance inst;
        inst.granularity = parse_granularity(ji.at("granularity").get<std::string>());
        inst.class_id = ji.value("class_id", 0);
        for (const auto& v : ji.at("polygon"))
          inst.polygon.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
        inst.score = ji.value("score", 0.0);
        if (ji.contains("mask_rle")) inst.mask_rle = ji.at("mask_rle").get<std::vector<int>>();
        pr.instances.push_back(std::move(inst));
      }
      out.push_back(std::move(pr));
    } catch (const std::exception& e) {
      throw validation_error(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace textdet
