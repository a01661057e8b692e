#include "websod/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <memory>
#include <sstream>

#include "websod/datamodel.hpp"

namespace websod {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::string_view kMagic = "WEBSOD-CHECKPOINT";

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

template <typename T>
std::vector<T> split(const std::string& s) {
  std::vector<T> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if constexpr (std::is_same_v<T, int>)
      out.push_back(std::stoi(item));
    else
      out.push_back(std::stod(item));
  }
  return out;
}

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void tensor(const std::string& name, const Tensor& t) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name.data(), name.size());
    u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) {
      const std::int32_t v = d;
      raw(&v, sizeof v);
    }
    raw(t.data.data(), t.data.size() * sizeof(double));
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  void tensor(const std::string& expected_name, Tensor& t) {
    std::string name(u32(), '\0');
    raw(name.data(), name.size());
    if (name != expected_name)
      throw CheckpointError("checkpoint tensor '" + name + "' where '" + expected_name + "' was expected");
    std::vector<int> shape(u32());
    for (auto& d : shape) {
      std::int32_t v;
      raw(&v, sizeof v);
      d = v;
    }
    if (shape != t.shape)
      throw CheckpointError("tensor '" + name + "' has shape " + Tensor(shape).shape_string() + ", expected " +
                            t.shape_string());
    raw(t.data.data(), t.data.size() * sizeof(double));
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string header(std::string_view kind, const std::map<std::string, std::string>& kv) {
  std::string h = std::string(kMagic) + "\n";
  h += "version=" + std::to_string(kCheckpointVersion) + "\n";
  h += "kind=" + std::string(kind) + "\n";
  for (const auto& [k, v] : kv) h += k + "=" + v + "\n";
  h += "---\n";
  return h;
}

std::map<std::string, std::string> parse_header(std::string_view bytes, std::string_view kind, std::size_t& body) {
  const auto end = bytes.find("\n---\n");
  if (bytes.substr(0, kMagic.size()) != kMagic || end == std::string_view::npos)
    throw CheckpointError("not a websod checkpoint");
  body = end + 5;
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(bytes.substr(0, end))};
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["version"] != std::to_string(kCheckpointVersion))
    throw CheckpointError("unsupported checkpoint version " + kv["version"]);
  if (kv["kind"] != kind) throw CheckpointError("checkpoint holds a " + kv["kind"] + ", expected " + std::string(kind));
  kv.erase("version");
  kv.erase("kind");
  return kv;
}

}  // namespace

std::map<std::string, std::string> detector_config_to_kv(const det::DetectorConfig& c) {
  std::map<std::string, std::string> kv;
  kv["num_classes"] = std::to_string(c.num_classes);
  kv["backbone.channels"] = join(c.backbone_channels);
  kv["backbone.strides"] = join(c.backbone_strides);
  kv["rpn.channels"] = std::to_string(c.rpn_channels);
  kv["anchors.sizes"] = join(c.anchor_sizes);
  kv["anchors.ratios"] = join(c.anchor_ratios);
  kv["head.pool_size"] = std::to_string(c.pool_size);
  kv["head.fc_dim"] = std::to_string(c.fc_dim);
  kv["cam.channels"] = std::to_string(c.cam_channels);
  kv["proposals.pre_nms_top_n"] = std::to_string(c.pre_nms_top_n);
  kv["proposals.top_n"] = std::to_string(c.proposals_top_n);
  kv["proposals.nms_iou"] = join(std::vector<double>{c.proposal_nms_iou});
  kv["proposals.min_size"] = join(std::vector<double>{c.min_proposal_size});
  kv["nms.iou"] = join(std::vector<double>{c.detection_nms_iou});
  kv["head.reg_weights"] = join(std::vector<double>(c.reg_weights.begin(), c.reg_weights.end()));
  return kv;
}

det::DetectorConfig detector_config_from_kv(const std::map<std::string, std::string>& kv) {
  det::DetectorConfig c;
  auto get = [&](const std::string& k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("num_classes")) c.num_classes = std::stoi(*v);
    if (auto v = get("backbone.channels")) c.backbone_channels = split<int>(*v);
    if (auto v = get("backbone.strides")) c.backbone_strides = split<int>(*v);
    if (auto v = get("rpn.channels")) c.rpn_channels = std::stoi(*v);
    if (auto v = get("anchors.sizes")) c.anchor_sizes = split<double>(*v);
    if (auto v = get("anchors.ratios")) c.anchor_ratios = split<double>(*v);
    if (auto v = get("head.pool_size")) c.pool_size = std::stoi(*v);
    if (auto v = get("head.fc_dim")) c.fc_dim = std::stoi(*v);
    if (auto v = get("cam.channels")) c.cam_channels = std::stoi(*v);
    if (auto v = get("proposals.pre_nms_top_n")) c.pre_nms_top_n = std::stoi(*v);
    if (auto v = get("proposals.top_n")) c.proposals_top_n = std::stoi(*v);
    if (auto v = get("proposals.nms_iou")) c.proposal_nms_iou = std::stod(*v);
    if (auto v = get("proposals.min_size")) c.min_proposal_size = std::stod(*v);
    if (auto v = get("nms.iou")) c.detection_nms_iou = std::stod(*v);
    if (auto v = get("head.reg_weights")) {
      auto w = split<double>(*v);
      if (w.size() != 4) throw std::invalid_argument("head.reg_weights needs 4 values");
      std::copy(w.begin(), w.end(), c.reg_weights.begin());
    }
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("bad detector configuration value: ") + e.what());
  }
  c.validate();
  return c;
}

std::string serialize_detector(const det::DetectorParams& params) {
  Writer w;
  const auto h = header("detector", detector_config_to_kv(params.config));
  w.raw(h.data(), h.size());
  det::for_each_tensor(params, [&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
  return std::move(w.str());
}

det::DetectorParams deserialize_detector(std::string_view bytes) {
  std::size_t body = 0;
  const auto kv = parse_header(bytes, "detector", body);
  auto params = det::init_detector(detector_config_from_kv(kv), 0);
  Reader r(bytes);
  r.seek(body);
  det::for_each_tensor(params, [&](const std::string& name, Tensor& t) { r.tensor(name, t); });
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return params;
}

std::string serialize_rfr(const rfr::RfrBlock& block) {
  Writer w;
  const auto h = header("rfr", {{"channels", std::to_string(block.channels())},
                                {"mid_channels", std::to_string(block.conv1.out_channels)}});
  w.raw(h.data(), h.size());
  rfr::for_each_tensor(block, [&](const char* name, const Tensor& t) { w.tensor(name, t); });
  return std::move(w.str());
}

rfr::RfrBlock deserialize_rfr(std::string_view bytes) {
  std::size_t body = 0;
  auto kv = parse_header(bytes, "rfr", body);
  rfr::RfrBlock block;
  try {
    block = rfr::make_rfr_block(std::stoi(kv["channels"]), std::stoi(kv["mid_channels"]), 0);
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("bad rfr header: ") + e.what());
  }
  Reader r(bytes);
  r.seek(body);
  rfr::for_each_tensor(block, [&](const char* name, Tensor& t) { r.tensor(name, t); });
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return block;
}

void save_detector(const std::filesystem::path& path, const det::DetectorParams& params) {
  write_text_file(path, serialize_detector(params));
}

det::DetectorParams load_detector(const std::filesystem::path& path) {
  try {
    return deserialize_detector(read_text_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const IngestionError& e) {
    throw CheckpointError(e.what());
  }
}

void save_rfr(const std::filesystem::path& path, const rfr::RfrBlock& block) { write_text_file(path, serialize_rfr(block)); }

rfr::RfrBlock load_rfr(const std::filesystem::path& path) {
  try {
    return deserialize_rfr(read_text_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const IngestionError& e) {
    throw CheckpointError(e.what());
  }
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string digest(const det::DetectorParams& params) { return sha256_hex(serialize_detector(params)); }
std::string digest(const rfr::RfrBlock& block) { return sha256_hex(serialize_rfr(block)); }

}  // namespace websod
