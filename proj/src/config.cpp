#include "websod/config.hpp"

#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "websod/datamodel.hpp"

namespace websod::pipeline {
namespace pt = boost::property_tree;

std::string to_string(eval::ApMethod m) { return m == eval::ApMethod::ElevenPoint ? "11point" : "allpoint"; }
std::string to_string(attn::SoftmaxAxis a) { return a == attn::SoftmaxAxis::Spatial ? "spatial" : "classes"; }
std::string to_string(attn::RoiReduce r) { return r == attn::RoiReduce::Max ? "max" : "average"; }

namespace {

template <class T>
std::string list_string(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt::format("{}", v[i]);
  return s;
}

template <class T>
T parse_scalar(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (in.fail() || !(in >> std::ws).eof()) throw IngestionError(where + ": cannot parse '" + text + "'");
  return value;
}

template <>
std::string parse_scalar<std::string>(const std::string& text, const std::string&) {
  return text;
}

class Reader {
 public:
  Reader(const pt::ptree& tree, std::string source) : tree_(tree), source_(std::move(source)) {}

  template <class T>
  void get(const std::string& section, const std::string& key, T& field) {
    used_.insert(section + "." + key);
    const auto sec = tree_.get_child_optional(pt::ptree::path_type(section, '/'));
    if (!sec) return;
    const auto node = sec->get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!node) return;
    field = parse_scalar<T>(*node, where(section, key));
  }

  template <class T>
  void get_list(const std::string& section, const std::string& key, std::vector<T>& field) {
    std::string text;
    get(section, key, text);
    if (text.empty()) return;
    field.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) field.push_back(parse_scalar<T>(item, where(section, key)));
  }

  template <class E>
  void get_enum(const std::string& section, const std::string& key, E& field, std::initializer_list<E> options) {
    std::string text;
    get(section, key, text);
    if (text.empty()) return;
    for (E e : options)
      if (to_string(e) == text) {
        field = e;
        return;
      }
    throw IngestionError(where(section, key) + ": unknown value '" + text + "'");
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty()) throw IngestionError(source_ + ": key '" + section + "' outside a section");
      for (const auto& [key, _] : body)
        if (!used_.contains(section + "." + key)) throw IngestionError(where(section, key) + ": unknown key");
    }
  }

 private:
  std::string where(const std::string& section, const std::string& key) const {
    return source_ + ": [" + section + "] " + key;
  }

  const pt::ptree& tree_;
  std::string source_;
  std::set<std::string> used_;
};

// Single walk over every field; `io` is either a reader or a writer.
template <class Io>
void visit(Io& io, PipelineConfig& c) {
  io.get("experiment", "seed", c.seed);

  auto& d = c.detector;
  io.get_list("detector", "backbone_channels", d.backbone_channels);
  io.get_list("detector", "backbone_strides", d.backbone_strides);
  io.get("detector", "rpn_channels", d.rpn_channels);
  io.get_list("detector", "anchor_sizes", d.anchor_sizes);
  io.get_list("detector", "anchor_ratios", d.anchor_ratios);
  io.get("detector", "pool_size", d.pool_size);
  io.get("detector", "fc_dim", d.fc_dim);
  io.get("detector", "cam_channels", d.cam_channels);
  io.get("detector", "pre_nms_top_n", d.pre_nms_top_n);
  io.get("detector", "proposals_top_n", d.proposals_top_n);
  io.get("detector", "proposal_nms_iou", d.proposal_nms_iou);
  io.get("detector", "detection_nms_iou", d.detection_nms_iou);
  io.get("detector", "min_proposal_size", d.min_proposal_size);
  io.get("detector", "reg_weight_x", d.reg_weights[0]);
  io.get("detector", "reg_weight_y", d.reg_weights[1]);
  io.get("detector", "reg_weight_w", d.reg_weights[2]);
  io.get("detector", "reg_weight_h", d.reg_weights[3]);

  auto& s = c.sampling;
  io.get("sampling", "rpn_batch", s.rpn_batch);
  io.get("sampling", "rpn_positive_fraction", s.rpn_positive_fraction);
  io.get("sampling", "rpn_positive_iou", s.rpn_positive_iou);
  io.get("sampling", "rpn_negative_iou", s.rpn_negative_iou);
  io.get("sampling", "roi_batch", s.roi_batch);
  io.get("sampling", "roi_foreground_fraction", s.roi_foreground_fraction);
  io.get("sampling", "foreground_iou", s.foreground_iou);
  io.get("sampling", "background_iou", s.background_iou);
  io.get("sampling", "train_proposals", s.train_proposals);
  io.get("sampling", "gt_jitter", s.gt_jitter);

  auto& l = c.loss;
  io.get("loss", "lambda1", l.lambda1);
  io.get("loss", "lambda2", l.lambda2);
  io.get("loss", "lambda3", l.lambda3);
  io.get("loss", "rpn_weight", l.rpn_weight);
  io.get("attention", "delta", l.attention.delta);
  io.get_enum("attention", "softmax", l.attention.softmax_axis, {attn::SoftmaxAxis::Spatial, attn::SoftmaxAxis::Classes});
  io.get_enum("attention", "roi_pooling", l.attention.reduce, {attn::RoiReduce::Max, attn::RoiReduce::Average});

  io.get("estimator", "score_threshold", c.estimator.score_threshold);
  io.get("estimator", "max_boxes_per_image", c.estimator.max_boxes_per_image);
  io.get("rfr", "mid_channels", c.rfr_mid_channels);

  for (auto [name, sched] : {std::pair{"base_train", &c.base_train}, std::pair{"web_train", &c.web_train},
                             std::pair{"rfr_train", &c.rfr_train}, std::pair{"ft_train", &c.ft_train}}) {
    io.get(name, "steps", sched->steps);
    io.get(name, "batch_size", sched->batch_size);
    io.get(name, "lr", sched->lr);
    io.get(name, "momentum", sched->momentum);
    io.get(name, "weight_decay", sched->weight_decay);
    io.get(name, "clip_norm", sched->clip_norm);
    io.get(name, "warmup_steps", sched->warmup_steps);
    io.get(name, "lr_drop_fraction", sched->lr_drop_fraction);
    io.get(name, "lr_drop_factor", sched->lr_drop_factor);
    io.get(name, "seed", sched->seed);
  }

  io.get("eval", "iou_threshold", c.eval.iou_threshold);
  io.get_enum("eval", "ap_method", c.eval.method, {eval::ApMethod::ElevenPoint, eval::ApMethod::AllPoint});
  io.get("eval", "score_threshold", c.eval.score_threshold);
}

class Writer {
 public:
  template <class T>
  void get(const std::string& section, const std::string& key, const T& v) {
    if constexpr (std::is_same_v<T, bool>)
      put(section, key, v ? "true" : "false");
    else
      put(section, key, fmt::format("{}", v));
  }
  template <class T>
  void get_list(const std::string& section, const std::string& key, const std::vector<T>& v) {
    put(section, key, list_string(v));
  }
  template <class E>
  void get_enum(const std::string& section, const std::string& key, const E& v, std::initializer_list<E>) {
    put(section, key, to_string(v));
  }

  std::string str() const { return out_; }

 private:
  void put(const std::string& section, const std::string& key, const std::string& value) {
    if (section != current_) {
      out_ += (out_.empty() ? "" : "\n") + std::string("[") + section + "]\n";
      current_ = section;
    }
    out_ += key + " = " + value + "\n";
  }

  std::string out_, current_;
};

}  // namespace

void PipelineConfig::validate() const {
  detector.validate();
  estimator.validate();
  if (rfr_mid_channels < 1) throw std::invalid_argument("rfr mid_channels must be positive");
  if (!(loss.attention.delta > 0)) throw std::invalid_argument("attention delta must be positive");
  if (!(eval.iou_threshold > 0 && eval.iou_threshold < 1)) throw std::invalid_argument("eval iou must lie in (0, 1)");
  for (const auto* s : {&base_train, &web_train, &rfr_train, &ft_train})
    if (s->steps < 0 || s->batch_size < 1 || !(s->lr > 0)) throw std::invalid_argument("invalid training schedule");
  if (sampling.rpn_batch < 1 || sampling.roi_batch < 1) throw std::invalid_argument("sampling batches must be positive");
}

PipelineConfig config_from_ini(const std::string& text, std::string_view source) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw IngestionError(std::string(source) + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  PipelineConfig c;
  Reader reader(tree, std::string(source));
  visit(reader, c);
  reader.reject_unknown();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw IngestionError(std::string(source) + ": " + e.what());
  }
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  return config_from_ini(read_text_file(path), path.string());
}

std::string config_to_ini(const PipelineConfig& config) {
  Writer w;
  visit(w, const_cast<PipelineConfig&>(config));
  return w.str();
}

}  // namespace websod::pipeline
