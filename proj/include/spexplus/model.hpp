// The assembled speaker-extraction network: twin multi-scale speech encoders
// (one shared parameter set), speaker encoder with classification head, TCN
// speaker extractor, and a decoder per scale.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spexplus/layers.hpp"
#include "spexplus/ops.hpp"
#include "spexplus/random.hpp"
#include "spexplus/tape.hpp"

namespace spexplus {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SpexPlusConfig {
  int sample_rate = 8000;
  // Filter lengths in samples (2.5 / 10 / 20 ms at 8 kHz). Stride is L1 / 2.
  std::size_t L1 = 20;
  std::size_t L2 = 80;
  std::size_t L3 = 160;
  std::size_t N = 256;   // encoder filters per scale
  std::size_t B = 8;     // TCN blocks per stack
  std::size_t R = 4;     // stacks
  std::size_t O = 256;   // bottleneck channels
  std::size_t P = 512;   // TCN conv channels
  std::size_t D = 256;   // speaker embedding dimension
  std::size_t N_R = 3;   // ResNet blocks in the speaker encoder
  std::size_t N_s = 101; // speaker classes
  std::size_t tcn_kernel = 3;
  bool tcn_bias = true;
  bool tied = true;
  // Normalization in front of the speaker encoder's first 1x1 conv: "gln" | "bn".
  std::string speaker_stem_norm = "gln";
  std::uint64_t seed = 0;

  std::size_t stride() const { return L1 / 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("SpexPlusConfig: " + m); };
    if (!(L1 < L2 && L2 < L3)) fail("filter lengths must satisfy L1 < L2 < L3");
    if (L1 < 2 || L1 % 2 != 0) fail("L1 must be even (stride is L1/2)");
    if (B < 1 || R < 1) fail("B and R must be at least 1");
    if (N == 0 || O == 0 || P == 0 || D == 0 || N_R == 0 || N_s == 0 || tcn_kernel == 0)
      fail("all dimensions must be positive");
    if (tcn_kernel % 2 == 0) fail("tcn_kernel must be odd");
    if (speaker_stem_norm != "gln" && speaker_stem_norm != "bn")
      fail("speaker_stem_norm must be gln or bn");
    if (sample_rate <= 0) fail("sample_rate must be positive");
  }

  // Frame count on every scale for a waveform of `samples` samples.
  std::size_t frames(std::size_t samples) const {
    if (samples < L3)
      throw ShapeError("waveform of " + std::to_string(samples) +
                       " samples is shorter than the longest filter (" + std::to_string(L3) + ")");
    return (samples - L1) / stride() + 1;
  }

  // Minimum encoder frames that survive N_R poolings by 3.
  std::size_t min_reference_frames() const {
    std::size_t f = 1;
    for (std::size_t i = 0; i < N_R; ++i) f *= 3;
    return f;
  }

  // Throws if a reference of `samples` samples cannot be pooled N_R times.
  void check_reference_length(std::size_t samples) const {
    const std::size_t k = frames(samples);
    if (k < min_reference_frames())
      throw ShapeError("reference of " + std::to_string(samples) + " samples gives " +
                       std::to_string(k) + " frames; " + std::to_string(N_R) +
                       " ResNet poolings need at least " + std::to_string(min_reference_frames()));
  }

  friend bool operator==(const SpexPlusConfig&, const SpexPlusConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SpexPlusConfig& c) {
  j = nlohmann::json{{"sample_rate", c.sample_rate}, {"L1", c.L1}, {"L2", c.L2}, {"L3", c.L3},
                     {"N", c.N}, {"B", c.B}, {"R", c.R}, {"O", c.O}, {"P", c.P}, {"D", c.D},
                     {"N_R", c.N_R}, {"N_s", c.N_s}, {"tcn_kernel", c.tcn_kernel},
                     {"tcn_bias", c.tcn_bias}, {"tied", c.tied},
                     {"speaker_stem_norm", c.speaker_stem_norm}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SpexPlusConfig& c) {
  SpexPlusConfig d;
  c.sample_rate = j.value("sample_rate", d.sample_rate);
  c.L1 = j.value("L1", d.L1);
  c.L2 = j.value("L2", d.L2);
  c.L3 = j.value("L3", d.L3);
  c.N = j.value("N", d.N);
  c.B = j.value("B", d.B);
  c.R = j.value("R", d.R);
  c.O = j.value("O", d.O);
  c.P = j.value("P", d.P);
  c.D = j.value("D", d.D);
  c.N_R = j.value("N_R", d.N_R);
  c.N_s = j.value("N_s", d.N_s);
  c.tcn_kernel = j.value("tcn_kernel", d.tcn_kernel);
  c.tcn_bias = j.value("tcn_bias", d.tcn_bias);
  c.tied = j.value("tied", d.tied);
  c.speaker_stem_norm = j.value("speaker_stem_norm", d.speaker_stem_norm);
  c.seed = j.value("seed", d.seed);
}

// Full-size configuration.
inline SpexPlusConfig paper_preset() { return SpexPlusConfig{}; }

// Desk-scale configuration used by tests and the acceptance suite.
inline SpexPlusConfig tiny_preset() {
  SpexPlusConfig c;
  c.N = 32;
  c.O = 32;
  c.P = 64;
  c.B = 4;
  c.R = 2;
  c.D = 32;
  c.N_R = 2;
  c.N_s = 8;
  return c;
}

inline SpexPlusConfig preset(const std::string& name) {
  if (name == "tiny") return tiny_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected tiny or paper)");
}

// ---------------------------------------------------------------------------

template <typename T>
struct MultiScaleCoefficients {
  std::array<Var<T>, 3> scales;  // each [N x K]

  std::size_t frames() const { return scales[0].cols(); }
};

template <typename T>
struct SpeakerEmbedding {
  Var<T> v;       // [D x 1]
  Var<T> logits;  // [N_s x 1]
};

template <typename T>
struct ExtractionOutput {
  std::array<Var<T>, 3> signals;  // s1, s2, s3, each [1 x T]
  std::array<Var<T>, 3> masks;
  SpeakerEmbedding<T> speaker;
  MultiScaleCoefficients<T> mixture_coefficients;
};

// Three parallel 1-D convolutions (L1/L2/L3) sharing stride L1/2, each
// followed by ReLU. The L2/L3 inputs are right-padded by L_i - L1 zeros so all
// scales produce the same frame count.
template <typename T>
class SpeechEncoder {
 public:
  SpeechEncoder() = default;
  SpeechEncoder(const SpexPlusConfig& c, Rng& rng) : l1_(c.L1) {
    const std::array<std::size_t, 3> lengths{c.L1, c.L2, c.L3};
    for (std::size_t i = 0; i < 3; ++i) {
      ConvOptions o;
      o.stride = c.stride();
      o.pad_right = lengths[i] - c.L1;
      convs_[i] = Conv1dLayer<T>(1, c.N, lengths[i], o, true, rng);
    }
  }

  MultiScaleCoefficients<T> forward(Tape<T>& tape, Var<T> waveform) {
    if (waveform.rows() != 1) throw ShapeError("SpeechEncoder: waveform must be [1 x T]");
    if (waveform.cols() < convs_[2].kernel())
      throw ShapeError("SpeechEncoder: waveform of " + std::to_string(waveform.cols()) +
                       " samples is shorter than L3 = " + std::to_string(convs_[2].kernel()));
    MultiScaleCoefficients<T> out;
    for (std::size_t i = 0; i < 3; ++i) out.scales[i] = relu(convs_[i].forward(tape, waveform));
    return out;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    static const char* names[3] = {"conv_short", "conv_middle", "conv_long"};
    for (std::size_t i = 0; i < 3; ++i) convs_[i].visit(join_name(prefix, names[i]), f);
  }

  const Conv1dLayer<T>& conv(std::size_t i) const { return convs_[i]; }

 private:
  std::size_t l1_ = 0;
  std::array<Conv1dLayer<T>, 3> convs_;
};

// conv1x1 -> BN -> PReLU -> conv1x1 -> BN -> (+ skip) -> PReLU -> max-pool(3).
// A 1x1 projection carries the skip when the width changes.
template <typename T>
class ResNetBlock {
 public:
  ResNetBlock() = default;
  ResNetBlock(std::size_t in, std::size_t out, Rng& rng)
      : conv1_(in, out, 1, {}, false, rng),
        bn1_(out),
        conv2_(out, out, 1, {}, false, rng),
        bn2_(out) {
    if (in != out) downsample_.emplace(in, out, 1, ConvOptions{}, false, rng);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> y = prelu1_.forward(tape, bn1_.forward(tape, conv1_.forward(tape, x)));
    y = bn2_.forward(tape, conv2_.forward(tape, y));
    Var<T> skip = downsample_ ? downsample_->forward(tape, x) : x;
    return max_pool1d(prelu2_.forward(tape, add(y, skip)), 3, 3);
  }

  void set_training(bool t) {
    bn1_.set_training(t);
    bn2_.set_training(t);
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    conv1_.visit(join_name(prefix, "conv1"), f);
    bn1_.visit(join_name(prefix, "bn1"), f);
    prelu1_.visit(join_name(prefix, "prelu1"), f);
    conv2_.visit(join_name(prefix, "conv2"), f);
    bn2_.visit(join_name(prefix, "bn2"), f);
    prelu2_.visit(join_name(prefix, "prelu2"), f);
    if (downsample_) downsample_->visit(join_name(prefix, "downsample"), f);
  }

 private:
  Conv1dLayer<T> conv1_;
  BatchNorm1d<T> bn1_;
  PReLU<T> prelu1_;
  Conv1dLayer<T> conv2_;
  BatchNorm1d<T> bn2_;
  PReLU<T> prelu2_;
  std::optional<Conv1dLayer<T>> downsample_;
};

template <typename T>
class SpeakerEncoder {
 public:
  SpeakerEncoder() = default;
  SpeakerEncoder(const SpexPlusConfig& c, Rng& rng) : use_bn_stem_(c.speaker_stem_norm == "bn") {
    if (use_bn_stem_)
      stem_bn_ = BatchNorm1d<T>(3 * c.N);
    else
      stem_gln_ = GlobalLayerNorm<T>(3 * c.N);
    stem_ = Conv1dLayer<T>(3 * c.N, c.O, 1, {}, true, rng);
    std::size_t width = c.O;
    for (std::size_t i = 0; i < c.N_R; ++i) {
      const std::size_t out = i == 0 ? c.O : c.P;
      blocks_.emplace_back(width, out, rng);
      width = out;
    }
    project_ = Conv1dLayer<T>(width, c.D, 1, {}, true, rng);
    classifier_ = Linear<T>(c.D, c.N_s, true, rng);
  }

  SpeakerEmbedding<T> forward(Tape<T>& tape, const MultiScaleCoefficients<T>& x) {
    Var<T> h = concat_channels<T>({x.scales[0], x.scales[1], x.scales[2]});
    h = use_bn_stem_ ? stem_bn_.forward(tape, h) : stem_gln_.forward(tape, h);
    h = stem_.forward(tape, h);
    for (auto& b : blocks_) h = b.forward(tape, h);
    SpeakerEmbedding<T> out;
    out.v = mean_time(project_.forward(tape, h));
    out.logits = classifier_.forward(tape, out.v);
    return out;
  }

  void set_training(bool t) {
    stem_bn_.set_training(t);
    for (auto& b : blocks_) b.set_training(t);
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    if (use_bn_stem_)
      stem_bn_.visit(join_name(prefix, "stem_norm"), f);
    else
      stem_gln_.visit(join_name(prefix, "stem_norm"), f);
    stem_.visit(join_name(prefix, "stem_conv"), f);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit(join_name(prefix, "resnet" + std::to_string(i)), f);
    project_.visit(join_name(prefix, "embed_conv"), f);
  }

  void visit_classifier(const std::string& prefix, const TensorVisitor<T>& f) {
    classifier_.visit(prefix, f);
  }

 private:
  bool use_bn_stem_ = false;
  GlobalLayerNorm<T> stem_gln_;
  BatchNorm1d<T> stem_bn_;
  Conv1dLayer<T> stem_;
  std::vector<ResNetBlock<T>> blocks_;
  Conv1dLayer<T> project_;
  Linear<T> classifier_;
};

// conv1x1 -> PReLU -> gLN -> depthwise dilated conv -> PReLU -> gLN -> conv1x1,
// plus the residual input. The first block of a stack also receives the
// speaker embedding repeated over time, concatenated on the channel axis.
template <typename T>
class TcnBlock {
 public:
  TcnBlock() = default;
  TcnBlock(std::size_t channels, std::size_t conv_channels, std::size_t embed_dim,
           std::size_t kernel, std::size_t dilation, bool bias, Rng& rng)
      : dilation_(dilation),
        takes_embedding_(embed_dim > 0),
        in_conv_(channels + embed_dim, conv_channels, 1, {}, bias, rng),
        norm1_(conv_channels),
        norm2_(conv_channels),
        out_conv_(conv_channels, channels, 1, {}, bias, rng) {
    ConvOptions o;
    o.dilation = dilation;
    o.groups = conv_channels;
    o.pad_left = o.pad_right = dilation * (kernel - 1) / 2;
    depthwise_ = Conv1dLayer<T>(conv_channels, conv_channels, kernel, o, bias, rng);
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, std::optional<Var<T>> embedding) {
    Var<T> h = x;
    if (takes_embedding_) {
      if (!embedding) throw std::logic_error("TcnBlock: embedding required by first block");
      h = concat_channels<T>({x, repeat_time(*embedding, x.cols())});
    }
    h = norm1_.forward(tape, prelu1_.forward(tape, in_conv_.forward(tape, h)));
    h = norm2_.forward(tape, prelu2_.forward(tape, depthwise_.forward(tape, h)));
    return add(x, out_conv_.forward(tape, h));
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    in_conv_.visit(join_name(prefix, "in_conv"), f);
    prelu1_.visit(join_name(prefix, "prelu1"), f);
    norm1_.visit(join_name(prefix, "norm1"), f);
    depthwise_.visit(join_name(prefix, "depthwise"), f);
    prelu2_.visit(join_name(prefix, "prelu2"), f);
    norm2_.visit(join_name(prefix, "norm2"), f);
    out_conv_.visit(join_name(prefix, "out_conv"), f);
  }

  std::size_t dilation() const { return dilation_; }
  bool takes_embedding() const { return takes_embedding_; }

 private:
  std::size_t dilation_ = 1;
  bool takes_embedding_ = false;
  Conv1dLayer<T> in_conv_;
  PReLU<T> prelu1_;
  GlobalLayerNorm<T> norm1_;
  Conv1dLayer<T> depthwise_;
  PReLU<T> prelu2_;
  GlobalLayerNorm<T> norm2_;
  Conv1dLayer<T> out_conv_;
};

template <typename T>
class SpeakerExtractor {
 public:
  SpeakerExtractor() = default;
  SpeakerExtractor(const SpexPlusConfig& c, Rng& rng)
      : norm_(3 * c.N), bottleneck_(3 * c.N, c.O, 1, {}, true, rng) {
    for (std::size_t r = 0; r < c.R; ++r) {
      std::vector<TcnBlock<T>> stack;
      for (std::size_t b = 0; b < c.B; ++b)
        stack.emplace_back(c.O, c.P, b == 0 ? c.D : 0, c.tcn_kernel, std::size_t{1} << b,
                           c.tcn_bias, rng);
      stacks_.push_back(std::move(stack));
    }
    for (auto& m : mask_convs_) m = Conv1dLayer<T>(c.O, c.N, 1, {}, true, rng);
  }

  std::array<Var<T>, 3> forward(Tape<T>& tape, const MultiScaleCoefficients<T>& y, Var<T> v) {
    Var<T> h = concat_channels<T>({y.scales[0], y.scales[1], y.scales[2]});
    h = bottleneck_.forward(tape, norm_.forward(tape, h));
    for (auto& stack : stacks_)
      for (auto& block : stack)
        h = block.forward(tape, h, block.takes_embedding() ? std::optional<Var<T>>(v) : std::nullopt);
    std::array<Var<T>, 3> masks;
    for (std::size_t i = 0; i < 3; ++i) masks[i] = relu(mask_convs_[i].forward(tape, h));
    return masks;
  }

  // Dilation of every block, stack by stack.
  std::vector<std::vector<std::size_t>> dilations() const {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& stack : stacks_) {
      std::vector<std::size_t> d;
      for (const auto& b : stack) d.push_back(b.dilation());
      out.push_back(std::move(d));
    }
    return out;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    norm_.visit(join_name(prefix, "input_norm"), f);
    bottleneck_.visit(join_name(prefix, "bottleneck"), f);
    for (std::size_t r = 0; r < stacks_.size(); ++r)
      for (std::size_t b = 0; b < stacks_[r].size(); ++b)
        stacks_[r][b].visit(join_name(prefix, "stack" + std::to_string(r) + ".block" + std::to_string(b)), f);
    for (std::size_t i = 0; i < 3; ++i) mask_convs_[i].visit(join_name(prefix, "mask" + std::to_string(i + 1)), f);
  }

 private:
  GlobalLayerNorm<T> norm_;
  Conv1dLayer<T> bottleneck_;
  std::vector<std::vector<TcnBlock<T>>> stacks_;
  std::array<Conv1dLayer<T>, 3> mask_convs_;
};

template <typename T>
class SpexPlusModel {
 public:
  explicit SpexPlusModel(SpexPlusConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, 0x5350));
    encoder_ = SpeechEncoder<T>(config_, rng);
    if (!config_.tied) reference_encoder_ = SpeechEncoder<T>(config_, rng);
    speaker_encoder_ = SpeakerEncoder<T>(config_, rng);
    extractor_ = SpeakerExtractor<T>(config_, rng);
    const std::array<std::size_t, 3> lengths{config_.L1, config_.L2, config_.L3};
    for (std::size_t i = 0; i < 3; ++i)
      decoders_[i] = ConvTranspose1dLayer<T>(config_.N, 1, lengths[i], config_.stride(), true, rng);
  }

  const SpexPlusConfig& config() const { return config_; }

  // Mixture-path encoder.
  MultiScaleCoefficients<T> encode(Tape<T>& tape, Var<T> waveform) {
    return encoder_.forward(tape, waveform);
  }

  // Reference-path encoder: the same parameters when tied.
  MultiScaleCoefficients<T> encode_reference(Tape<T>& tape, Var<T> waveform) {
    return config_.tied ? encoder_.forward(tape, waveform) : reference_encoder_.forward(tape, waveform);
  }

  SpeakerEmbedding<T> speaker_encode(Tape<T>& tape, const MultiScaleCoefficients<T>& x) {
    if (x.frames() < config_.min_reference_frames())
      throw ShapeError("speaker_encode: " + std::to_string(x.frames()) +
                       " reference frames cannot be pooled " + std::to_string(config_.N_R) + " times");
    return speaker_encoder_.forward(tape, x);
  }

  std::array<Var<T>, 3> extract(Tape<T>& tape, const MultiScaleCoefficients<T>& y, const SpeakerEmbedding<T>& v) {
    return extractor_.forward(tape, y, v.v);
  }

  // Reconstructs scale i from masked coefficients and fits it to `length` samples.
  Var<T> decode(Tape<T>& tape, Var<T> masked, std::size_t scale, std::size_t length) {
    return fit_time(decoders_.at(scale).forward(tape, masked), length);
  }

  // mixture [1 x T], reference [1 x T_ref]
  ExtractionOutput<T> forward(Tape<T>& tape, Var<T> mixture, Var<T> reference) {
    config_.check_reference_length(reference.cols());
    ExtractionOutput<T> out;
    out.mixture_coefficients = encode(tape, mixture);
    const auto x = encode_reference(tape, reference);
    out.speaker = speaker_encode(tape, x);
    out.masks = extract(tape, out.mixture_coefficients, out.speaker);
    for (std::size_t i = 0; i < 3; ++i)
      out.signals[i] = decode(tape, mul(out.masks[i], out.mixture_coefficients.scales[i]), i, mixture.cols());
    return out;
  }

  ExtractionOutput<T> forward(Tape<T>& tape, const Tensor<T>& mixture, const Tensor<T>& reference) {
    return forward(tape, tape.constant(mixture), tape.constant(reference));
  }

  // Inference: s1 only.
  std::vector<T> infer(std::span<const T> mixture, std::span<const T> reference) {
    Tape<T> tape;
    auto out = forward(tape, Tensor<T>::row({mixture.begin(), mixture.end()}),
                       Tensor<T>::row({reference.begin(), reference.end()}));
    return out.signals[0].value().storage();
  }

  void set_training(bool t) {
    training_ = t;
    speaker_encoder_.set_training(t);
  }
  bool training() const { return training_; }

  void visit(const TensorVisitor<T>& f) {
    encoder_.visit("encoder", f);
    if (!config_.tied) reference_encoder_.visit("reference_encoder", f);
    speaker_encoder_.visit("speaker_encoder", f);
    speaker_encoder_.visit_classifier("classifier", f);
    extractor_.visit("extractor", f);
    static const char* names[3] = {"decoder_short", "decoder_middle", "decoder_long"};
    for (std::size_t i = 0; i < 3; ++i) decoders_[i].visit(names[i], f);
  }
  void visit(const std::string& prefix, const TensorVisitor<T>& f) {
    visit([&](const std::string& n, Tensor<T>& t, TensorRole r) { f(join_name(prefix, n), t, r); });
  }

  std::vector<NamedTensor<T>> parameters() { return named_tensors<T>(*this, TensorRole::kParameter); }
  std::vector<NamedTensor<T>> buffers() { return named_tensors<T>(*this, TensorRole::kBuffer); }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

  std::vector<std::vector<std::size_t>> dilations() const { return extractor_.dilations(); }
  const SpeechEncoder<T>& mixture_encoder() const { return encoder_; }
  const SpeechEncoder<T>& reference_encoder() const { return config_.tied ? encoder_ : reference_encoder_; }

 private:
  SpexPlusConfig config_;
  bool training_ = true;
  SpeechEncoder<T> encoder_;
  SpeechEncoder<T> reference_encoder_;
  SpeakerEncoder<T> speaker_encoder_;
  SpeakerExtractor<T> extractor_;
  std::array<ConvTranspose1dLayer<T>, 3> decoders_;
};

}  // namespace spexplus
