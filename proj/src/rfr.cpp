#include "websod/rfr.hpp"

#include "websod/checkpoint.hpp"

namespace websod::rfr {
namespace {

void check_target_base_only(const Stage3Data& data, const ClassSplit& split) {
  for (const auto& s : data.target)
    for (const auto& g : s.boxes)
      if (!split.is_base(g.class_id))
        throw std::invalid_argument("stage-3 target image '" + s.image_id + "' contains a non-base class");
}

std::vector<train::Stream> make_streams(const Stage3Data& data, const Stage3Losses& losses) {
  if (data.target.empty() || data.web.empty()) throw train::TrainingError("stage 3 needs target and web images");
  return {{"target", data.target, losses.target}, {"web", data.web, losses.web}};
}

}  // namespace

Stage3Losses Stage3Losses::standard(const train::LossSpec& base) {
  Stage3Losses l{base, base};
  l.target.attentive = false;
  l.target.image_cls = false;
  l.web.attentive = true;
  l.web.image_cls = false;
  return l;
}

Stage3Result rfr_train(const det::DetectorParams& detector, RfrBlock& block, const Stage3Data& data,
                       const ClassSplit& split, const Stage3Losses& losses, const train::SamplingConfig& sampling,
                       const train::Schedule& schedule) {
  check_target_base_only(data, split);
  const auto streams = make_streams(data, losses);
  Stage3Result r;
  r.frozen_digest_before = digest(detector);
  det::DetectorParams working = detector;
  r.history = train::train(working, &block, streams, train::TrainableSet::rfr_only(), sampling, schedule);
  r.frozen_digest_after = digest(working);
  if (r.frozen_digest_after != r.frozen_digest_before)
    throw FrozenParameterViolation("detector parameters changed during refinement training");
  return r;
}

std::string head_digest(const det::DetectorParams& params) {
  std::string bytes;
  for (const Tensor* t : {&params.cls.weight, &params.cls.bias, &params.reg.weight, &params.reg.bias})
    bytes.append(reinterpret_cast<const char*>(t->data.data()), t->data.size() * sizeof(double));
  return sha256_hex(bytes);
}

Stage3Result finetune_all(det::DetectorParams& detector, const Stage3Data& data, const ClassSplit& split,
                          const Stage3Losses& losses, const train::SamplingConfig& sampling,
                          const train::Schedule& schedule) {
  check_target_base_only(data, split);
  const auto streams = make_streams(data, losses);
  Stage3Result r;
  r.frozen_digest_before = head_digest(detector);
  r.history = train::train(detector, nullptr, streams, train::TrainableSet::feature_layers(), sampling, schedule);
  r.frozen_digest_after = head_digest(detector);
  if (r.frozen_digest_after != r.frozen_digest_before)
    throw FrozenParameterViolation("detection head changed during fine-tuning");
  return r;
}

FinalDetector::FinalDetector(det::DetectorParams params, std::optional<RfrBlock> block)
    : params_(std::move(params)), block_(std::move(block)) {
  if (block_ && block_->channels() != params_.config.feature_channels())
    throw std::invalid_argument("refinement block channels do not match the detector features");
}

std::vector<Detection> FinalDetector::detect(const Tensor& image, double score_threshold) const {
  return det::detect(image, params_, score_threshold, block());
}

FinalDetector assemble_final_detector(const det::DetectorParams& web_params, const RfrBlock& block) {
  return FinalDetector(web_params, block);
}

}  // namespace websod::rfr
