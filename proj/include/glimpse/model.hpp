#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "glimpse/data.hpp"
#include "glimpse/error.hpp"
#include "glimpse/rng.hpp"
#include "glimpse/tensor.hpp"

namespace glimpse {

enum class Task { reconstruction, classification, segmentation };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::reconstruction: return "reconstruction";
    case Task::classification: return "classification";
    case Task::segmentation: return "segmentation";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  if (s == "reconstruction") return Task::reconstruction;
  if (s == "classification") return Task::classification;
  if (s == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + s + "'");
}

struct ModelConfig {
  int image_h = 64, image_w = 64;
  int patch = 8;
  int channels = 3;
  int enc_layers = 4, enc_dim = 128, enc_heads = 4;
  int dec_layers = 2, dec_dim = 64, dec_heads = 4;
  int mlp_ratio = 4;
  Task task = Task::reconstruction;
  int num_classes = 0;                  // classification alphabet
  int seg_classes = 0;                  // segmentation alphabet
  int attention_source_layer = -1;      // decoder layer to read maps from; -1 = last
  bool classifier_two_layer = false;    // head-only regime uses two linears + GELU
  std::string entropy_source = "attention";  // "attention" | "kkt"

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int num_patches() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * channels; }
  int seq_len() const { return num_patches() + 1; }  // patches + CLS
  int capture_layer() const { return attention_source_layer < 0 ? dec_layers - 1 : attention_source_layer; }
  int head_out_dim() const {
    return task == Task::segmentation ? seg_classes * patch * patch : patch_dim();
  }

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || patch <= 0 || channels <= 0)
      throw ConfigError("model: image/patch dimensions must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("model: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " not divisible by patch " + std::to_string(patch));
    if (enc_layers <= 0 || dec_layers <= 0) throw ConfigError("model: need at least one layer per stack");
    if (enc_dim % enc_heads != 0 || dec_dim % dec_heads != 0)
      throw ConfigError("model: embedding dims must divide by head counts");
    if (enc_dim % 4 != 0 || dec_dim % 4 != 0)
      throw ConfigError("model: embedding dims must be multiples of 4 for 2-d positional codes");
    if (mlp_ratio <= 0) throw ConfigError("model: mlp_ratio must be positive");
    if (task == Task::classification && num_classes < 2)
      throw ConfigError("model: classification needs num_classes >= 2");
    if (task == Task::segmentation && seg_classes < 2)
      throw ConfigError("model: segmentation needs seg_classes >= 2");
    const int cap = capture_layer();
    if (cap < 0 || cap >= dec_layers)
      throw ConfigError("model: attention_source_layer " + std::to_string(attention_source_layer) +
                        " outside [0," + std::to_string(dec_layers) + ")");
    if (entropy_source != "attention" && entropy_source != "kkt")
      throw ConfigError("model: entropy_source must be 'attention' or 'kkt'");
  }

  bool operator==(const ModelConfig&) const = default;

  std::string to_kv() const {
    std::ostringstream os;
    os << "image_h=" << image_h << "\nimage_w=" << image_w << "\npatch=" << patch
       << "\nchannels=" << channels << "\nenc_layers=" << enc_layers << "\nenc_dim=" << enc_dim
       << "\nenc_heads=" << enc_heads << "\ndec_layers=" << dec_layers << "\ndec_dim=" << dec_dim
       << "\ndec_heads=" << dec_heads << "\nmlp_ratio=" << mlp_ratio << "\ntask=" << task_name(task)
       << "\nnum_classes=" << num_classes << "\nseg_classes=" << seg_classes
       << "\nattention_source_layer=" << attention_source_layer
       << "\nclassifier_two_layer=" << (classifier_two_layer ? 1 : 0)
       << "\nentropy_source=" << entropy_source << "\n";
    return os.str();
  }

  static ModelConfig from_kv(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("bad config line '" + line + "'");
      const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "image_h") c.image_h = std::stoi(val);
      else if (key == "image_w") c.image_w = std::stoi(val);
      else if (key == "patch") c.patch = std::stoi(val);
      else if (key == "channels") c.channels = std::stoi(val);
      else if (key == "enc_layers") c.enc_layers = std::stoi(val);
      else if (key == "enc_dim") c.enc_dim = std::stoi(val);
      else if (key == "enc_heads") c.enc_heads = std::stoi(val);
      else if (key == "dec_layers") c.dec_layers = std::stoi(val);
      else if (key == "dec_dim") c.dec_dim = std::stoi(val);
      else if (key == "dec_heads") c.dec_heads = std::stoi(val);
      else if (key == "mlp_ratio") c.mlp_ratio = std::stoi(val);
      else if (key == "task") c.task = task_from_name(val);
      else if (key == "num_classes") c.num_classes = std::stoi(val);
      else if (key == "seg_classes") c.seg_classes = std::stoi(val);
      else if (key == "attention_source_layer") c.attention_source_layer = std::stoi(val);
      else if (key == "classifier_two_layer") c.classifier_two_layer = std::stoi(val) != 0;
      else if (key == "entropy_source") c.entropy_source = val;
      else throw ConfigError("unknown model config key '" + key + "'");
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Patch <-> image layout
// patch index i = gy * grid_w + gx (row-major); within a patch the vector is
// channel-major: element = c*P*P + py*P + px.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> patchify(const Image& img, int P) {
  if (img.height % P != 0 || img.width % P != 0)
    throw ConfigError("patchify: image " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + " not divisible by patch " + std::to_string(P));
  const int gh = img.height / P, gw = img.width / P, C = img.channels;
  Tensor<T> out({static_cast<std::size_t>(gh) * gw, static_cast<std::size_t>(P) * P * C});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const std::size_t row = static_cast<std::size_t>(gy) * gw + gx;
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            out.at(row, static_cast<std::size_t>(c) * P * P + py * P + px) =
                static_cast<T>(img.at(c, gy * P + py, gx * P + px));
    }
  return out;
}

template <class T>
Image unpatchify(const Tensor<T>& patches, int image_h, int image_w, int P, int channels) {
  const int gh = image_h / P, gw = image_w / P;
  if (patches.rows() != static_cast<std::size_t>(gh) * gw ||
      patches.cols() != static_cast<std::size_t>(P) * P * channels)
    throw ShapeError("unpatchify: tensor " + shape_str(patches.shape()) + " does not tile " +
                     std::to_string(image_h) + "x" + std::to_string(image_w));
  Image img(channels, image_h, image_w);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const std::size_t row = static_cast<std::size_t>(gy) * gw + gx;
      for (int c = 0; c < channels; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            img.at(c, gy * P + py, gx * P + px) = static_cast<float>(
                patches.at(row, static_cast<std::size_t>(c) * P * P + py * P + px));
    }
  return img;
}

// ---------------------------------------------------------------------------
// Fixed 2-d sin/cos positional codes (half the channels encode the row index,
// half the column index). The CLS token carries an all-zero code.
// ---------------------------------------------------------------------------

namespace detail {

inline void sincos_1d(double pos, int dim, double* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
    out[2 * i] = std::sin(pos * omega);
    out[2 * i + 1] = std::cos(pos * omega);
  }
}

}  // namespace detail

template <class T>
Tensor<T> sincos_pos_2d(int gh, int gw, int dim) {
  if (dim % 4 != 0) throw ConfigError("positional codes need dim % 4 == 0");
  Tensor<T> out({static_cast<std::size_t>(gh) * gw, static_cast<std::size_t>(dim)});
  std::vector<double> buf(static_cast<std::size_t>(dim));
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      detail::sincos_1d(gy, dim / 2, buf.data());
      detail::sincos_1d(gx, dim / 2, buf.data() + dim / 2);
      const std::size_t row = static_cast<std::size_t>(gy) * gw + gx;
      for (int d = 0; d < dim; ++d) out.at(row, static_cast<std::size_t>(d)) = static_cast<T>(buf[static_cast<std::size_t>(d)]);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Attention capture
// ---------------------------------------------------------------------------

template <class T>
struct AttentionCapture {
  int layer = -1;
  int heads = 0;
  int seq = 0;  // S = token count of the captured stack
  std::vector<T> probs;  // heads x S x S, row-major per head
  std::vector<std::uint8_t> key_allowed;  // 0 marks pad key columns

  T prob(int h, int q, int k) const {
    return probs[(static_cast<std::size_t>(h) * seq + q) * seq + k];
  }
};

template <class T>
struct EncodeResult {
  Tensor<T> latents;  // (t + 1 + pads) x E, row 0 = CLS, rows 1..t real tokens
  int real_tokens = 0;
};

template <class T>
struct DecodeResult {
  Tensor<T> preds;  // N x head_out_dim (CLS output omitted)
  AttentionCapture<T> capture;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
class MaeModel {
 public:
  struct AttnParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct BlockParams {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    AttnParams at;
    Tensor<T> w1, b1, w2, b2;
  };

  explicit MaeModel(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(seed).split(0x90de1u);
    const int E = cfg_.enc_dim, D = cfg_.dec_dim, PD = cfg_.patch_dim();
    w_patch_ = trunc_normal<T>(rng, {static_cast<std::size_t>(PD), static_cast<std::size_t>(E)}, 0.02);
    b_patch_ = Tensor<T>({static_cast<std::size_t>(E)});
    cls_token_ = trunc_normal<T>(rng, {1, static_cast<std::size_t>(E)}, 0.02);
    enc_.resize(static_cast<std::size_t>(cfg_.enc_layers));
    for (auto& b : enc_) init_block(b, E, rng);
    enc_norm_g_ = Tensor<T>({static_cast<std::size_t>(E)}, T(1));
    enc_norm_b_ = Tensor<T>({static_cast<std::size_t>(E)});
    e2d_w_ = trunc_normal<T>(rng, {static_cast<std::size_t>(E), static_cast<std::size_t>(D)}, 0.02);
    e2d_b_ = Tensor<T>({static_cast<std::size_t>(D)});
    mask_token_ = trunc_normal<T>(rng, {1, static_cast<std::size_t>(D)}, 0.02);
    dec_.resize(static_cast<std::size_t>(cfg_.dec_layers));
    for (auto& b : dec_) init_block(b, D, rng);
    dec_norm_g_ = Tensor<T>({static_cast<std::size_t>(D)}, T(1));
    dec_norm_b_ = Tensor<T>({static_cast<std::size_t>(D)});
    head_w_ = trunc_normal<T>(rng, {static_cast<std::size_t>(D), static_cast<std::size_t>(cfg_.head_out_dim())}, 0.02);
    head_b_ = Tensor<T>({static_cast<std::size_t>(cfg_.head_out_dim())});
    if (cfg_.task == Task::classification) {
      const int K = cfg_.num_classes;
      if (cfg_.classifier_two_layer) {
        cls_w1_ = trunc_normal<T>(rng, {static_cast<std::size_t>(E), static_cast<std::size_t>(E)}, 0.02);
        cls_b1_ = Tensor<T>({static_cast<std::size_t>(E)});
        cls_w2_ = trunc_normal<T>(rng, {static_cast<std::size_t>(E), static_cast<std::size_t>(K)}, 0.02);
        cls_b2_ = Tensor<T>({static_cast<std::size_t>(K)});
      } else {
        cls_w1_ = trunc_normal<T>(rng, {static_cast<std::size_t>(E), static_cast<std::size_t>(K)}, 0.02);
        cls_b1_ = Tensor<T>({static_cast<std::size_t>(K)});
      }
    }
    enc_pos_ = sincos_pos_2d<T>(cfg_.grid_h(), cfg_.grid_w(), E);
    dec_pos_ = sincos_pos_2d<T>(cfg_.grid_h(), cfg_.grid_w(), D);
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config_mut() { return cfg_; }

  // Re-aims attention capture at another decoder layer. Weights and outputs
  // are untouched; only the maps feeding the entropy selector change.
  void set_attention_source_layer(int layer) {
    ModelConfig c = cfg_;
    c.attention_source_layer = layer;
    c.validate();
    cfg_ = c;
  }

  // Named parameters in fixed registration order; leaf slots match indices.
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& params_mut() { return params_; }

  Tensor<T> param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw ContractError("no parameter named '" + name + "'");
  }

  void set_requires_grad(bool b) {
    for (auto& [n, t] : params_) t.set_requires_grad(b);
  }

  // Encoder over t visible patches (+ optional pad tokens for batch shaping).
  // t = 0 is the mask-tokens-only special case: the encoder sees CLS alone.
  EncodeResult<T> encode(const Tensor<T>& patches, const std::vector<int>& positions,
                         int pads = 0, AttentionCapture<T>* capture = nullptr) const {
    const int N = cfg_.num_patches(), E = cfg_.enc_dim;
    const int t = static_cast<int>(positions.size());
    if (patches.rank() != 2 || patches.rows() != static_cast<std::size_t>(t) ||
        (t > 0 && patches.cols() != static_cast<std::size_t>(cfg_.patch_dim())))
      throw ShapeError("encode: patches " + shape_str(patches.shape()) + " do not match " +
                       std::to_string(t) + " positions of dim " + std::to_string(cfg_.patch_dim()));
    if (t > N) throw ContractError("encode: more visible patches than grid positions");
    if (pads < 0) throw ContractError("encode: negative pad count");
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(N), 0);
    std::vector<std::size_t> pos_idx;
    pos_idx.reserve(positions.size());
    for (int p : positions) {
      if (p < 0 || p >= N) throw ContractError("encode: position " + std::to_string(p) + " outside grid");
      if (seen[static_cast<std::size_t>(p)]) throw ContractError("encode: duplicate position " + std::to_string(p));
      seen[static_cast<std::size_t>(p)] = 1;
      pos_idx.push_back(static_cast<std::size_t>(p));
    }

    std::vector<Tensor<T>> rows;
    rows.push_back(cls_token_);
    if (t > 0) {
      auto emb = add(add_rowwise(matmul(patches, w_patch_), b_patch_), gather_rows(enc_pos_, pos_idx));
      rows.push_back(emb);
    }
    if (pads > 0) rows.push_back(Tensor<T>({static_cast<std::size_t>(pads), static_cast<std::size_t>(E)}));
    Tensor<T> x = rows.size() == 1 ? rows[0] : concat_rows(rows);

    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(1 + t + pads), 1);
    for (int i = 0; i < pads; ++i) allowed[static_cast<std::size_t>(1 + t + i)] = 0;

    for (std::size_t li = 0; li < enc_.size(); ++li) {
      AttentionCapture<T>* cap = (capture && li + 1 == enc_.size()) ? capture : nullptr;
      if (cap) cap->layer = static_cast<int>(li);
      x = block_forward(enc_[li], x, cfg_.enc_heads, allowed, cap, false);
    }
    x = layernorm(x, enc_norm_g_, enc_norm_b_);
    return {x, t};
  }

  // Decoder over the full grid: visible latents at their positions, the
  // learned mask token everywhere else, CLS first. Captures attention at the
  // configured source layer.
  DecodeResult<T> decode(const Tensor<T>& latents, const std::vector<int>& known_positions) const {
    const int N = cfg_.num_patches();
    const int t = static_cast<int>(known_positions.size());
    if (latents.rank() != 2 || latents.rows() != static_cast<std::size_t>(t) + 1 ||
        latents.cols() != static_cast<std::size_t>(cfg_.enc_dim))
      throw ShapeError("decode: latents " + shape_str(latents.shape()) + " do not match t=" +
                       std::to_string(t) + ", E=" + std::to_string(cfg_.enc_dim));
    std::vector<int> vis_index(static_cast<std::size_t>(N), -1);
    for (int i = 0; i < t; ++i) {
      const int p = known_positions[static_cast<std::size_t>(i)];
      if (p < 0 || p >= N) throw ContractError("decode: position " + std::to_string(p) + " outside grid");
      if (vis_index[static_cast<std::size_t>(p)] >= 0)
        throw ContractError("decode: duplicate position " + std::to_string(p));
      vis_index[static_cast<std::size_t>(p)] = i;
    }

    auto lat_d = add_rowwise(matmul(latents, e2d_w_), e2d_b_);
    auto cls_d = slice_rows(lat_d, 0, 1);
    auto vis_d = slice_rows(lat_d, 1, static_cast<std::size_t>(t) + 1);
    // bank = [visible rows; mask token]; each grid slot gathers its source row
    auto bank = concat_rows(std::vector<Tensor<T>>{vis_d, mask_token_});
    std::vector<std::size_t> pick(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i)
      pick[static_cast<std::size_t>(i)] =
          vis_index[static_cast<std::size_t>(i)] >= 0 ? static_cast<std::size_t>(vis_index[static_cast<std::size_t>(i)]) : static_cast<std::size_t>(t);
    auto grid = add(gather_rows(bank, pick), dec_pos_);
    auto x = concat_rows(std::vector<Tensor<T>>{cls_d, grid});

    const std::vector<std::uint8_t> allowed(static_cast<std::size_t>(N) + 1, 1);
    DecodeResult<T> out;
    const int cap_layer = cfg_.capture_layer();
    const bool want_kkt = cfg_.entropy_source == "kkt";
    for (std::size_t li = 0; li < dec_.size(); ++li) {
      AttentionCapture<T>* cap = (static_cast<int>(li) == cap_layer) ? &out.capture : nullptr;
      if (cap) cap->layer = static_cast<int>(li);
      x = block_forward(dec_[li], x, cfg_.dec_heads, allowed, cap, want_kkt);
    }
    x = layernorm(x, dec_norm_g_, dec_norm_b_);
    auto preds_all = add_rowwise(matmul(x, head_w_), head_b_);
    out.preds = slice_rows(preds_all, 1, static_cast<std::size_t>(N) + 1);
    return out;
  }

  // Class logits from the encoder's CLS latent.
  Tensor<T> classify(const Tensor<T>& latents) const {
    if (cfg_.task != Task::classification)
      throw ConfigError("classify: model task is " + task_name(cfg_.task));
    auto cls = slice_rows(latents, 0, 1);
    auto h = add_rowwise(matmul(cls, cls_w1_), cls_b1_);
    if (cfg_.classifier_two_layer) h = add_rowwise(matmul(gelu(h), cls_w2_), cls_b2_);
    return h;
  }

 private:
  void init_block(BlockParams& b, int dim, Rng& rng) {
    const std::size_t d = static_cast<std::size_t>(dim);
    const std::size_t m = static_cast<std::size_t>(dim * cfg_.mlp_ratio);
    b.ln1_g = Tensor<T>({d}, T(1));
    b.ln1_b = Tensor<T>({d});
    b.at.wq = trunc_normal<T>(rng, {d, d}, 0.02);
    b.at.bq = Tensor<T>({d});
    b.at.wk = trunc_normal<T>(rng, {d, d}, 0.02);
    b.at.bk = Tensor<T>({d});
    b.at.wv = trunc_normal<T>(rng, {d, d}, 0.02);
    b.at.bv = Tensor<T>({d});
    b.at.wo = trunc_normal<T>(rng, {d, d}, 0.02);
    b.at.bo = Tensor<T>({d});
    b.ln2_g = Tensor<T>({d}, T(1));
    b.ln2_b = Tensor<T>({d});
    b.w1 = trunc_normal<T>(rng, {d, m}, 0.02);
    b.b1 = Tensor<T>({m});
    b.w2 = trunc_normal<T>(rng, {m, d}, 0.02);
    b.b2 = Tensor<T>({d});
  }

  Tensor<T> block_forward(const BlockParams& p, Tensor<T> x, int heads,
                          const std::vector<std::uint8_t>& allowed, AttentionCapture<T>* cap,
                          bool want_kkt) const {
    const std::size_t dim = x.cols();
    const std::size_t dh = dim / static_cast<std::size_t>(heads);
    const std::size_t S = x.rows();
    auto h = layernorm(x, p.ln1_g, p.ln1_b);
    auto q = add_rowwise(matmul(h, p.at.wq), p.at.bq);
    auto k = add_rowwise(matmul(h, p.at.wk), p.at.bk);
    auto v = add_rowwise(matmul(h, p.at.wv), p.at.bv);
    if (cap) {
      cap->heads = heads;
      cap->seq = static_cast<int>(S);
      cap->probs.clear();
      cap->probs.reserve(static_cast<std::size_t>(heads) * S * S);
      cap->key_allowed = allowed;
    }
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      auto qh = slice_cols(q, static_cast<std::size_t>(hd) * dh, (static_cast<std::size_t>(hd) + 1) * dh);
      auto kh = slice_cols(k, static_cast<std::size_t>(hd) * dh, (static_cast<std::size_t>(hd) + 1) * dh);
      auto vh = slice_cols(v, static_cast<std::size_t>(hd) * dh, (static_cast<std::size_t>(hd) + 1) * dh);
      auto probs = masked_softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), allowed);
      if (cap) {
        if (want_kkt) {
          // literal key-similarity map: softmax(K K^T / sqrt(d_h)), detached
          typename Tape<T>::NoGrad ng;
          Tensor<T> kplain(kh.shape(), kh.data());
          auto kkt = masked_softmax_rows(scale(matmul_nt(kplain, kplain), inv_sqrt), allowed);
          cap->probs.insert(cap->probs.end(), kkt.data().begin(), kkt.data().end());
        } else {
          cap->probs.insert(cap->probs.end(), probs.data().begin(), probs.data().end());
        }
      }
      outs.push_back(matmul(probs, vh));
    }
    auto attn = add_rowwise(matmul(concat_cols(outs), p.at.wo), p.at.bo);
    x = add(x, attn);
    auto h2 = layernorm(x, p.ln2_g, p.ln2_b);
    auto m = add_rowwise(matmul(gelu(add_rowwise(matmul(h2, p.w1), p.b1)), p.w2), p.b2);
    return add(x, m);
  }

  void register_params() {
    params_.clear();
    auto reg = [&](const std::string& name, Tensor<T>& t) { params_.emplace_back(name, t); };
    reg("patch_proj.w", w_patch_);
    reg("patch_proj.b", b_patch_);
    reg("cls_token", cls_token_);
    auto reg_block = [&](const std::string& prefix, BlockParams& b) {
      reg(prefix + ".ln1.g", b.ln1_g);
      reg(prefix + ".ln1.b", b.ln1_b);
      reg(prefix + ".attn.wq", b.at.wq);
      reg(prefix + ".attn.bq", b.at.bq);
      reg(prefix + ".attn.wk", b.at.wk);
      reg(prefix + ".attn.bk", b.at.bk);
      reg(prefix + ".attn.wv", b.at.wv);
      reg(prefix + ".attn.bv", b.at.bv);
      reg(prefix + ".attn.wo", b.at.wo);
      reg(prefix + ".attn.bo", b.at.bo);
      reg(prefix + ".ln2.g", b.ln2_g);
      reg(prefix + ".ln2.b", b.ln2_b);
      reg(prefix + ".mlp.w1", b.w1);
      reg(prefix + ".mlp.b1", b.b1);
      reg(prefix + ".mlp.w2", b.w2);
      reg(prefix + ".mlp.b2", b.b2);
    };
    for (std::size_t i = 0; i < enc_.size(); ++i) reg_block("enc." + std::to_string(i), enc_[i]);
    reg("enc_norm.g", enc_norm_g_);
    reg("enc_norm.b", enc_norm_b_);
    reg("enc2dec.w", e2d_w_);
    reg("enc2dec.b", e2d_b_);
    reg("mask_token", mask_token_);
    for (std::size_t i = 0; i < dec_.size(); ++i) reg_block("dec." + std::to_string(i), dec_[i]);
    reg("dec_norm.g", dec_norm_g_);
    reg("dec_norm.b", dec_norm_b_);
    reg("head.w", head_w_);
    reg("head.b", head_b_);
    if (cfg_.task == Task::classification) {
      reg("cls_head.w1", cls_w1_);
      reg("cls_head.b1", cls_b1_);
      if (cfg_.classifier_two_layer) {
        reg("cls_head.w2", cls_w2_);
        reg("cls_head.b2", cls_b2_);
      }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      params_[i].second.node()->leaf_slot = static_cast<int>(i);
      params_[i].second.set_requires_grad(true);
    }
  }

  ModelConfig cfg_;
  Tensor<T> w_patch_, b_patch_, cls_token_;
  std::vector<BlockParams> enc_, dec_;
  Tensor<T> enc_norm_g_, enc_norm_b_;
  Tensor<T> e2d_w_, e2d_b_, mask_token_;
  Tensor<T> dec_norm_g_, dec_norm_b_;
  Tensor<T> head_w_, head_b_;
  Tensor<T> cls_w1_, cls_b1_, cls_w2_, cls_b2_;
  Tensor<T> enc_pos_, dec_pos_;  // fixed, never trained
  std::vector<std::pair<std::string, Tensor<T>>> params_;
};

}  // namespace glimpse
