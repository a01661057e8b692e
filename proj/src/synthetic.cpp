#include "websod/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "websod/image_io.hpp"

namespace websod::synth {
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void add_noise(Tensor& img, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : img.data) v = std::clamp(v + n(rng), 0.0, 1.0);
}

// Paints `shape` inside the square of side `size` at (x0, y0) and returns the
// tight pixel box, or nothing if no pixel was covered.
std::optional<Box> paint_shape(Tensor& img, const std::string& shape, double x0, double y0, double size, Rgb color,
                               double alpha) {
  const int h = img.dim(1), w = img.dim(2);
  int bx1 = w, by1 = h, bx2 = -1, by2 = -1;
  const int ix0 = std::max(0, static_cast<int>(std::floor(x0))), iy0 = std::max(0, static_cast<int>(std::floor(y0)));
  const int ix1 = std::min(w, static_cast<int>(std::ceil(x0 + size))),
            iy1 = std::min(h, static_cast<int>(std::ceil(y0 + size)));
  for (int y = iy0; y < iy1; ++y)
    for (int x = ix0; x < ix1; ++x) {
      const double u = 2.0 * (x + 0.5 - x0) / size - 1.0, v = 2.0 * (y + 0.5 - y0) / size - 1.0;
      if (!shape_contains(shape, u, v)) continue;
      img.at(0, y, x) = alpha * color.r + (1 - alpha) * img.at(0, y, x);
      img.at(1, y, x) = alpha * color.g + (1 - alpha) * img.at(1, y, x);
      img.at(2, y, x) = alpha * color.b + (1 - alpha) * img.at(2, y, x);
      bx1 = std::min(bx1, x), by1 = std::min(by1, y), bx2 = std::max(bx2, x), by2 = std::max(by2, y);
    }
  if (bx2 < 0) return std::nullopt;
  return Box(bx1, by1, bx2 + 1, by2 + 1);
}

bool overlaps(const Box& a, const std::vector<Box>& others, double margin) {
  return std::any_of(others.begin(), others.end(), [&](const Box& b) {
    return a.x1() < b.x2() + margin && b.x1() < a.x2() + margin && a.y1() < b.y2() + margin &&
           b.y1() < a.y2() + margin;
  });
}

Rgb object_color(std::mt19937_64& rng) { return hsv(uniform(rng, 0, 1), uniform(rng, 0.7, 1.0), uniform(rng, 0.6, 1.0)); }

Tensor target_background(const SyntheticBenchmarkSpec& spec, std::mt19937_64& rng) {
  const int n = spec.image_size;
  Tensor img({3, n, n});
  const Rgb base = hsv(uniform(rng, 0, 1), uniform(rng, 0.1, 0.35), uniform(rng, 0.3, 0.6));
  struct Wave {
    double fx, fy, phase, amp[3];
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    const double angle = uniform(rng, 0, std::numbers::pi), freq = uniform(rng, 0.1, 0.45);
    Wave wv{freq * std::cos(angle), freq * std::sin(angle), uniform(rng, 0, 2 * std::numbers::pi), {}};
    for (double& a : wv.amp) a = spec.target_texture * uniform(rng, 0.3, 1.0) / 3.0;
    waves.push_back(wv);
  }
  const double base_c[3] = {base.r, base.g, base.b};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double v = base_c[c];
        for (const auto& wv : waves) v += wv.amp[c] * std::sin(wv.fx * x + wv.fy * y + wv.phase);
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  return img;
}

Tensor web_background(const SyntheticBenchmarkSpec& spec, std::mt19937_64& rng) {
  const int n = spec.image_size;
  Tensor img({3, n, n});
  const Rgb top = hsv(uniform(rng, 0, 1), uniform(rng, 0.0, 0.15), uniform(rng, 0.85, 1.0));
  const Rgb bottom = hsv(uniform(rng, 0, 1), uniform(rng, 0.0, 0.15), uniform(rng, 0.8, 1.0));
  for (int y = 0; y < n; ++y) {
    const double t = static_cast<double>(y) / (n - 1);
    const double col[3] = {top.r + t * (bottom.r - top.r), top.g + t * (bottom.g - top.g), top.b + t * (bottom.b - top.b)};
    for (int c = 0; c < 3; ++c)
      for (int x = 0; x < n; ++x) img.at(c, y, x) = col[c];
  }
  return img;
}

void write_target_split(const SyntheticBenchmarkSpec& spec, const fs::path& dir, const std::string& prefix, int count,
                        const std::vector<int>& allowed, std::uint64_t stream) {
  const auto vocab = spec.vocabulary();
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  std::mt19937_64 rng(spec.seed * 1000003ULL + stream);
  for (int i = 0; i < count; ++i) {
    const std::string id = fmt::format("{}_{:05d}", prefix, i);
    auto r = render_target_image(spec, allowed, rng);
    write_png(dir / "images" / (id + ".png"), r.image);
    VocAnnotation ann{id + ".png", spec.image_size, spec.image_size, r.objects, 0};
    write_text_file(dir / "annotations" / (id + ".xml"), write_voc_annotation(ann, vocab));
  }
}

}  // namespace

ClassSplit SyntheticBenchmarkSpec::split() const {
  std::vector<std::string> base;
  for (const auto& c : classes)
    if (std::find(novel.begin(), novel.end(), c) == novel.end()) base.push_back(c);
  return ClassSplit(vocabulary(), base, novel);
}

void SyntheticBenchmarkSpec::validate() const {
  for (const auto& c : classes) shape_contains(c, 0, 0);  // throws on unknown shapes
  const auto s = split();
  if (s.base_ids().empty() || s.novel_ids().empty()) throw std::invalid_argument("benchmark needs base and novel classes");
  if (image_size < 32) throw std::invalid_argument("benchmark image_size must be at least 32");
  if (target_train_count < 1 || target_test_count < 1 || target_full_count < 0 || web_per_class < 1)
    throw std::invalid_argument("benchmark split sizes must be positive");
  if (target_min_objects < 1 || target_max_objects < target_min_objects)
    throw std::invalid_argument("invalid target object count range");
  if (!(target_min_size >= 6 && target_max_size >= target_min_size && target_max_size <= image_size / 2.0))
    throw std::invalid_argument("invalid target object size range");
  if (!(web_min_size >= 6 && web_max_size >= web_min_size && web_max_size <= image_size - 2 * web_center_jitter))
    throw std::invalid_argument("invalid web object size range");
  if (!(distractor_min_size >= 6 && distractor_max_size >= distractor_min_size))
    throw std::invalid_argument("invalid distractor size range");
  if (!(web_distractor_prob >= 0 && web_distractor_prob <= 1)) throw std::invalid_argument("distractor probability out of range");
  if (!(target_contrast > 0 && target_contrast <= 1)) throw std::invalid_argument("target contrast out of range");
}

bool shape_contains(const std::string& shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v), r2 = u * u + v * v;
  if (shape == "circle") return r2 <= 1.0;
  if (shape == "square") return au <= 0.92 && av <= 0.92;
  if (shape == "triangle") return v >= -1.0 && v <= 1.0 && au <= (v + 1.0) / 2.0;
  if (shape == "cross") return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
  if (shape == "diamond") return au + av <= 1.0;
  if (shape == "hbar") return au <= 1.0 && av <= 0.4;
  if (shape == "vbar") return av <= 1.0 && au <= 0.4;
  if (shape == "ring") return r2 <= 1.0 && r2 >= 0.3;
  if (shape == "frame") return std::max(au, av) <= 0.92 && std::max(au, av) >= 0.55;
  if (shape == "ellipse") return u * u + v * v / 0.25 <= 1.0;
  if (shape == "hexagon") return av <= 0.87 && au * 0.87 + av * 0.5 <= 0.87;
  if (shape == "star") {
    const double a = std::atan2(v, u), rad = std::sqrt(r2);
    return rad <= 0.45 + 0.55 * std::pow(std::abs(std::cos(2.5 * a)), 3.0);
  }
  throw std::invalid_argument("unknown shape '" + shape + "'");
}

RenderedImage render_target_image(const SyntheticBenchmarkSpec& spec, std::span<const int> allowed_classes,
                                  std::mt19937_64& rng) {
  RenderedImage out;
  out.image = target_background(spec, rng);
  const int n = spec.image_size;
  const int count = uniform_int(rng, spec.target_min_objects, spec.target_max_objects);
  std::vector<Box> placed;
  for (int k = 0; k < count; ++k) {
    const int cls = allowed_classes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(allowed_classes.size()) - 1))];
    const Rgb color = object_color(rng);
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double size = uniform(rng, spec.target_min_size, spec.target_max_size);
      const double x0 = uniform(rng, 1, n - size - 1), y0 = uniform(rng, 1, n - size - 1);
      const Box square(x0, y0, x0 + size, y0 + size);
      if (overlaps(square, placed, 2.0)) continue;
      auto box = paint_shape(out.image, spec.classes[static_cast<std::size_t>(cls)], x0, y0, size, color,
                             spec.target_contrast);
      if (!box) break;
      placed.push_back(square);
      out.objects.push_back({*box, cls});
      break;
    }
  }
  add_noise(out.image, spec.target_noise, rng);
  return out;
}

RenderedImage render_web_image(const SyntheticBenchmarkSpec& spec, int label, std::mt19937_64& rng) {
  RenderedImage out;
  out.image = web_background(spec, rng);
  const int n = spec.image_size;
  const double size = uniform(rng, spec.web_min_size, spec.web_max_size);
  const double cx = n / 2.0 + uniform(rng, -spec.web_center_jitter, spec.web_center_jitter);
  const double cy = n / 2.0 + uniform(rng, -spec.web_center_jitter, spec.web_center_jitter);
  const double x0 = std::clamp(cx - size / 2, 1.0, n - size - 1), y0 = std::clamp(cy - size / 2, 1.0, n - size - 1);
  const bool with_distractor = uniform(rng, 0, 1) < spec.web_distractor_prob;
  const Rgb color = object_color(rng);
  auto box = paint_shape(out.image, spec.classes[static_cast<std::size_t>(label)], x0, y0, size, color, 1.0);
  out.objects.push_back({*box, label});
  if (with_distractor) {
    const auto base = spec.split().base_ids();
    std::vector<int> pool;
    for (int b : base)
      if (b != label) pool.push_back(b);
    const int cls = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
    const Rgb dcolor = object_color(rng);
    const std::vector<Box> placed{Box(x0, y0, x0 + size, y0 + size)};
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double ds = uniform(rng, spec.distractor_min_size, spec.distractor_max_size);
      const double dx = uniform(rng, 0, n - ds), dy = uniform(rng, 0, n - ds);
      if (overlaps(Box(dx, dy, dx + ds, dy + ds), placed, 1.0)) continue;
      if (auto db = paint_shape(out.image, spec.classes[static_cast<std::size_t>(cls)], dx, dy, ds, dcolor, 1.0))
        out.distractors.push_back({*db, cls});
      break;
    }
  }
  add_noise(out.image, spec.web_noise, rng);
  return out;
}

void generate_synthetic_benchmark(const SyntheticBenchmarkSpec& spec, const fs::path& out_dir, bool force) {
  spec.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    if (!force) throw std::runtime_error("output directory '" + out_dir.string() + "' already exists (use --force)");
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir);
  const auto vocab = spec.vocabulary();
  const auto split = spec.split();
  std::vector<int> all(static_cast<std::size_t>(vocab.size()));
  for (int i = 0; i < vocab.size(); ++i) all[static_cast<std::size_t>(i)] = i;

  write_target_split(spec, out_dir / "target-train", "tt", spec.target_train_count, split.base_ids(), 1);
  write_target_split(spec, out_dir / "target-test", "te", spec.target_test_count, all, 2);
  if (spec.target_full_count > 0)
    write_target_split(spec, out_dir / "target-full", "tf", spec.target_full_count, all, 3);

  const fs::path web = out_dir / "web-train", gt = out_dir / "web-gt";
  fs::create_directories(web / "images");
  fs::create_directories(gt / "annotations");
  std::mt19937_64 rng(spec.seed * 1000003ULL + 4);
  std::vector<WebManifestEntry> manifest;
  const int total = spec.web_per_class * vocab.size();
  for (int i = 0; i < total; ++i) {
    const int label = i % vocab.size();
    const std::string id = fmt::format("web_{:05d}", i);
    auto r = render_web_image(spec, label, rng);
    write_png(web / "images" / (id + ".png"), r.image);
    manifest.push_back({id, "images/" + id + ".png", label});
    VocAnnotation ann{id + ".png", spec.image_size, spec.image_size, r.objects, 0};
    write_text_file(gt / "annotations" / (id + ".xml"), write_voc_annotation(ann, vocab));
  }
  write_text_file(web / "manifest.tsv", write_web_manifest(manifest, vocab));
  write_text_file(out_dir / "benchmark.ini", spec_to_ini(spec));
}

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

std::string spec_to_ini(const SyntheticBenchmarkSpec& s) {
  std::string o;
  o += "[classes]\n";
  o += "all = " + join(s.classes) + "\n";
  o += "novel = " + join(s.novel) + "\n";
  o += "base = " + join(s.split().base_names()) + "\n";
  o += "\n[benchmark]\n";
  o += fmt::format("seed = {}\n", s.seed);
  o += fmt::format("image_size = {}\n", s.image_size);
  o += fmt::format("target_train_count = {}\n", s.target_train_count);
  o += fmt::format("target_test_count = {}\n", s.target_test_count);
  o += fmt::format("target_full_count = {}\n", s.target_full_count);
  o += fmt::format("web_per_class = {}\n", s.web_per_class);
  o += fmt::format("target_min_objects = {}\n", s.target_min_objects);
  o += fmt::format("target_max_objects = {}\n", s.target_max_objects);
  o += fmt::format("target_min_size = {}\n", s.target_min_size);
  o += fmt::format("target_max_size = {}\n", s.target_max_size);
  o += fmt::format("target_contrast = {}\n", s.target_contrast);
  o += fmt::format("target_noise = {}\n", s.target_noise);
  o += fmt::format("target_texture = {}\n", s.target_texture);
  o += fmt::format("web_min_size = {}\n", s.web_min_size);
  o += fmt::format("web_max_size = {}\n", s.web_max_size);
  o += fmt::format("web_center_jitter = {}\n", s.web_center_jitter);
  o += fmt::format("web_noise = {}\n", s.web_noise);
  o += fmt::format("web_distractor_prob = {}\n", s.web_distractor_prob);
  o += fmt::format("distractor_min_size = {}\n", s.distractor_min_size);
  o += fmt::format("distractor_max_size = {}\n", s.distractor_max_size);
  return o;
}

SyntheticBenchmarkSpec spec_from_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw IngestionError(std::string("benchmark spec: ") + e.what());
  }
  SyntheticBenchmarkSpec s;
  if (auto v = tree.get_optional<std::string>("classes.all")) s.classes = split_list(*v);
  if (auto v = tree.get_optional<std::string>("classes.novel")) s.novel = split_list(*v);
  auto get = [&](const char* key, auto& field) {
    field = tree.get<std::decay_t<decltype(field)>>(std::string("benchmark.") + key, field);
  };
  get("seed", s.seed);
  get("image_size", s.image_size);
  get("target_train_count", s.target_train_count);
  get("target_test_count", s.target_test_count);
  get("target_full_count", s.target_full_count);
  get("web_per_class", s.web_per_class);
  get("target_min_objects", s.target_min_objects);
  get("target_max_objects", s.target_max_objects);
  get("target_min_size", s.target_min_size);
  get("target_max_size", s.target_max_size);
  get("target_contrast", s.target_contrast);
  get("target_noise", s.target_noise);
  get("target_texture", s.target_texture);
  get("web_min_size", s.web_min_size);
  get("web_max_size", s.web_max_size);
  get("web_center_jitter", s.web_center_jitter);
  get("web_noise", s.web_noise);
  get("web_distractor_prob", s.web_distractor_prob);
  get("distractor_min_size", s.distractor_min_size);
  get("distractor_max_size", s.distractor_max_size);
  s.validate();
  return s;
}

SyntheticBenchmarkSpec load_benchmark_spec(const fs::path& bench_dir) {
  return spec_from_ini(read_text_file(bench_dir / "benchmark.ini"));
}

}  // namespace websod::synth
