#include "websod/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "websod/image_io.hpp"

namespace websod {

namespace pt = boost::property_tree;

Vocabulary::Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw std::invalid_argument("empty class name in vocabulary");
    if (!seen.insert(n).second) throw std::invalid_argument("duplicate class name in vocabulary: " + n);
  }
}

std::optional<int> Vocabulary::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

ClassSplit::ClassSplit(const Vocabulary& vocab, std::vector<std::string> base, std::vector<std::string> novel)
    : base_(std::move(base)), novel_(std::move(novel)) {
  std::set<int> all;
  auto resolve = [&](const std::vector<std::string>& names, std::vector<int>& ids) {
    for (const auto& n : names) {
      auto id = vocab.find(n);
      if (!id) throw std::invalid_argument("class split names unknown class '" + n + "'");
      if (!all.insert(*id).second) throw std::invalid_argument("class '" + n + "' is listed twice in the split");
      ids.push_back(*id);
    }
  };
  resolve(base_, base_ids_);
  resolve(novel_, novel_ids_);
  if (static_cast<int>(all.size()) != vocab.size())
    throw std::invalid_argument("class split does not cover the vocabulary");
}

bool ClassSplit::is_base(int class_id) const {
  return std::find(base_ids_.begin(), base_ids_.end(), class_id) != base_ids_.end();
}

bool ClassSplit::is_novel(int class_id) const {
  return std::find(novel_ids_.begin(), novel_ids_.end(), class_id) != novel_ids_.end();
}

void PseudoAnnotation::validate(double threshold) const {
  for (const auto& b : boxes) {
    if (b.class_id != image_label)
      throw std::logic_error("pseudo box on " + image_id + " carries class " + std::to_string(b.class_id) +
                             " but the image label is " + std::to_string(image_label));
    if (b.score < threshold)
      throw std::logic_error("pseudo box on " + image_id + " has score below the estimation threshold");
  }
}

namespace {

template <typename T>
T required(const pt::ptree& node, const std::string& key, std::string_view source) {
  auto v = node.get_optional<T>(key);
  if (!v) throw IngestionError(std::string(source) + ": missing or malformed field '" + key + "'");
  return *v;
}

}  // namespace

VocAnnotation parse_voc_annotation(std::string_view xml_text, const Vocabulary& vocab, std::string_view source) {
  pt::ptree tree;
  try {
    std::istringstream in{std::string(xml_text)};
    pt::read_xml(in, tree, pt::xml_parser::trim_whitespace);
  } catch (const pt::xml_parser_error& e) {
    throw IngestionError(std::string(source) + ": malformed XML: " + e.message());
  }
  auto root = tree.get_child_optional("annotation");
  if (!root) throw IngestionError(std::string(source) + ": missing field 'annotation'");

  VocAnnotation ann;
  ann.filename = root->get<std::string>("filename", "");
  if (auto size = root->get_child_optional("size")) {
    ann.width = required<int>(*size, "width", source);
    ann.height = required<int>(*size, "height", source);
  }
  for (const auto& [key, obj] : *root) {
    if (key != "object") continue;
    const auto name = required<std::string>(obj, "name", source);
    const auto id = vocab.find(name);
    if (!id) throw IngestionError(std::string(source) + ": field 'object/name' has unknown class '" + name + "'");
    if (obj.get<int>("difficult", 0) != 0) {
      ++ann.dropped_difficult;
      continue;
    }
    auto bb = obj.get_child_optional("bndbox");
    if (!bb) throw IngestionError(std::string(source) + ": missing field 'object/bndbox'");
    const double xmin = required<double>(*bb, "xmin", source);
    const double ymin = required<double>(*bb, "ymin", source);
    const double xmax = required<double>(*bb, "xmax", source);
    const double ymax = required<double>(*bb, "ymax", source);
    try {
      ann.objects.push_back({Box(xmin - 1.0, ymin - 1.0, xmax, ymax), *id});
    } catch (const std::invalid_argument& e) {
      throw IngestionError(std::string(source) + ": field 'object/bndbox' invalid: " + e.what());
    }
  }
  return ann;
}

std::string write_voc_annotation(const VocAnnotation& ann, const Vocabulary& vocab) {
  // Hand-written so the output is stable byte for byte.
  std::ostringstream os;
  os.precision(17);
  os << "<annotation>\n";
  os << "  <filename>" << ann.filename << "</filename>\n";
  os << "  <size>\n    <width>" << ann.width << "</width>\n    <height>" << ann.height
     << "</height>\n    <depth>3</depth>\n  </size>\n";
  for (const auto& o : ann.objects) {
    os << "  <object>\n";
    os << "    <name>" << vocab.name(o.class_id) << "</name>\n";
    os << "    <difficult>0</difficult>\n";
    os << "    <bndbox>\n";
    os << "      <xmin>" << o.box.x1() + 1.0 << "</xmin>\n";
    os << "      <ymin>" << o.box.y1() + 1.0 << "</ymin>\n";
    os << "      <xmax>" << o.box.x2() << "</xmax>\n";
    os << "      <ymax>" << o.box.y2() << "</ymax>\n";
    os << "    </bndbox>\n";
    os << "  </object>\n";
  }
  os << "</annotation>\n";
  return os.str();
}

std::vector<WebManifestEntry> load_web_manifest(std::string_view manifest_text, const Vocabulary& vocab,
                                                std::string_view source) {
  std::vector<WebManifestEntry> out;
  std::unordered_set<std::string> ids;
  std::istringstream in{std::string(manifest_text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = std::string(source) + ":" + std::to_string(line_no);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IngestionError(where + ": expected '<path>\\t<label>'");
    std::string path = line.substr(0, tab);
    std::string label = line.substr(tab + 1);
    const auto id = vocab.find(label);
    if (!id) throw IngestionError(where + ": unknown label '" + label + "'");
    std::string image_id = std::filesystem::path(path).stem().string();
    if (!ids.insert(image_id).second) throw IngestionError(where + ": duplicate image id '" + image_id + "'");
    out.push_back({std::move(image_id), std::move(path), *id});
  }
  return out;
}

std::string write_web_manifest(const std::vector<WebManifestEntry>& entries, const Vocabulary& vocab) {
  std::string out;
  for (const auto& e : entries) out += e.path + "\t" + vocab.name(e.image_label) + "\n";
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::vector<std::pair<std::string, VocAnnotation>> load_annotation_dir(const std::filesystem::path& dir,
                                                                      const Vocabulary& vocab) {
  const auto ann_dir = dir / "annotations";
  if (!std::filesystem::is_directory(ann_dir)) throw IngestionError("missing directory " + ann_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(ann_dir))
    if (e.path().extension() == ".xml") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::vector<std::pair<std::string, VocAnnotation>> out;
  out.reserve(files.size());
  for (const auto& f : files) out.emplace_back(f.stem().string(), parse_voc_annotation(read_text_file(f), vocab, f.string()));
  return out;
}

std::vector<TargetImageRecord> load_target_split(const std::filesystem::path& dir, const Vocabulary& vocab) {
  std::vector<TargetImageRecord> out;
  for (auto& [id, ann] : load_annotation_dir(dir, vocab)) {
    TargetImageRecord rec;
    rec.image_id = id;
    rec.image = read_png(dir / "images" / (ann.filename.empty() ? id + ".png" : ann.filename));
    rec.objects = std::move(ann.objects);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<WebImageRecord> load_web_split(const std::filesystem::path& dir, const Vocabulary& vocab) {
  const auto manifest = dir / "manifest.tsv";
  auto entries = load_web_manifest(read_text_file(manifest), vocab, manifest.string());
  std::vector<WebImageRecord> out;
  out.reserve(entries.size());
  for (auto& e : entries) out.push_back({e.image_id, read_png(dir / e.path), e.image_label});
  return out;
}

}  // namespace websod
