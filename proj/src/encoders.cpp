#include "clipvs/encoders.hpp"

#include <cctype>
#include <cmath>

#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"

namespace clipvs {

nn::Tensor TextEncoder::encode(std::string_view text) const {
  const auto ids = tokenize(text);
  nn::NoGradGuard no_grad;
  nn::Var out = encode_embeddings(nn::Var(token_embeddings(ids)));
  return out.value().reshaped({output_dim()});
}

ReferenceTextEncoder::ReferenceTextEncoder(TextEncoderConfig config) : config_(config) {
  if (config_.vocab_size < 3 || config_.token_dim <= 0 || config_.output_dim <= 0 || config_.max_length < 3)
    throw ContractError("text encoder: bad configuration");
  nn::Rng rng(config_.seed);
  const int d = config_.token_dim;
  vocab_ = params_.add("text.token_embedding", nn::Tensor::randn({config_.vocab_size, d}, 0.02, rng), false);
  positions_ = params_.add("text.positional_embedding", nn::Tensor::randn({config_.max_length, d}, 0.01, rng),
                           false);
  wq_ = nn::Linear::create(params_, "text.attn.q", d, d, rng);
  wk_ = nn::Linear::create(params_, "text.attn.k", d, d, rng);
  wv_ = nn::Linear::create(params_, "text.attn.v", d, d, rng);
  wo_ = nn::Linear::create(params_, "text.attn.out", d, d, rng);
  mlp_in_ = nn::Linear::create(params_, "text.mlp.in", d, 4 * d, rng);
  mlp_out_ = nn::Linear::create(params_, "text.mlp.out", 4 * d, d, rng);
  proj_ = nn::Linear::create(params_, "text.projection", d, config_.output_dim, rng);
  params_.set_trainable("", false);
}

std::vector<int> ReferenceTextEncoder::tokenize(std::string_view text, bool markers) const {
  std::vector<int> ids;
  if (markers) ids.push_back(kStartToken);
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    const auto h = nn::fnv1a(word.data(), word.size());
    ids.push_back(2 + static_cast<int>(h % static_cast<std::uint64_t>(config_.vocab_size - 2)));
    word.clear();
  };
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      word.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      flush();
    }
  }
  flush();
  if (markers) ids.push_back(kEndToken);
  return ids;
}

nn::Tensor ReferenceTextEncoder::token_embeddings(std::span<const int> ids) const {
  const int d = config_.token_dim;
  nn::Tensor out({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= config_.vocab_size) throw ContractError("text encoder: token id out of range");
    std::copy_n(vocab_.value().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return out;
}

nn::Var ReferenceTextEncoder::encode_embeddings(const nn::Var& tokens) const {
  if (tokens.value().rank() != 2 || tokens.dim(1) != config_.token_dim)
    throw ContractError("text encoder: expected [L, " + std::to_string(config_.token_dim) + "] tokens, got " +
                        nn::shape_string(tokens.shape()));
  const int len = tokens.dim(0);
  if (len < 1 || len > config_.max_length) throw ContractError("text encoder: sequence length out of range");

  std::vector<int> rows(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) rows[static_cast<std::size_t>(i)] = i;
  nn::Var x = nn::add(tokens, nn::select_rows(positions_, rows));

  nn::Var h = nn::layer_norm_rows(x);
  nn::Var scores = nn::scale(nn::matmul_nt(wq_(h), wk_(h)), 1.0 / std::sqrt(static_cast<double>(config_.token_dim)));
  nn::Var attn = nn::matmul(nn::softmax_rows(scores), wv_(h));
  x = nn::add(x, wo_(attn));
  h = nn::layer_norm_rows(x);
  x = nn::add(x, mlp_out_(nn::relu(mlp_in_(h))));

  const int last = len - 1;
  nn::Var pooled = nn::layer_norm_rows(nn::select_rows(x, std::span<const int>(&last, 1)));
  return proj_(pooled);
}

CropCnn::CropCnn(CropCnnConfig config, nn::Rng& rng, const std::string& prefix) : config_(std::move(config)) {
  if (config_.input_size < 4 || config_.channels.empty() || config_.output_dim <= 0)
    throw ContractError("crop cnn: bad configuration");
  int in = 3;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    convs_.push_back(nn::Conv2d::create(params_, prefix + ".conv" + std::to_string(i + 1), in,
                                        config_.channels[i], 3, 2, rng));
    in = config_.channels[i];
  }
  proj_ = nn::Linear::create(params_, prefix + ".proj", in, config_.output_dim, rng);
}

nn::Var CropCnn::forward(const nn::Var& batch) const {
  nn::Var x = batch;
  for (const auto& conv : convs_) x = nn::relu(conv(x));
  return proj_(nn::global_avg_pool(x));
}

nn::Tensor CropCnn::prepare(std::span<const cv::Mat> crops) const {
  const int s = config_.input_size;
  const std::size_t per = static_cast<std::size_t>(s) * s * 3;
  nn::Tensor batch({static_cast<int>(crops.size()), s, s, 3});
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const nn::Tensor t = to_tensor(crops[i], s, s);
    std::copy(t.values().begin(), t.values().end(), batch.values().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return batch;
}

namespace {
nn::Tensor normalized_rows(nn::Tensor t) {
  auto m = t.as_rows();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n > 0) m.row(r) /= n;
  }
  return t;
}
}  // namespace

ReferenceImageEncoder::ReferenceImageEncoder(CropCnnConfig config, std::uint64_t seed)
    : net_([&] {
        nn::Rng rng(seed);
        return CropCnn(std::move(config), rng, "clip_image");
      }()) {
  net_.parameters().set_trainable("", false);
}

nn::Tensor ReferenceImageEncoder::embed(std::span<const cv::Mat> crops) const {
  if (crops.empty()) return nn::Tensor({0, output_dim()});
  nn::NoGradGuard no_grad;
  return normalized_rows(net_.forward(nn::Var(net_.prepare(crops))).value());
}

CnnTeacher::CnnTeacher(CropCnnConfig config, int num_identities, std::uint64_t seed)
    : net_([&] {
        nn::Rng rng(seed);
        return CropCnn(std::move(config), rng, "teacher.cnn");
      }()),
      num_identities_(num_identities) {
  if (num_identities < 1) throw ContractError("teacher: needs at least one identity");
  nn::Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  classifier_ = nn::Linear::create(head_params_, "teacher.classifier", net_.config().output_dim, num_identities, rng);
}

nn::Tensor CnnTeacher::embed(std::span<const cv::Mat> crops) const {
  if (crops.empty()) return nn::Tensor({0, output_dim()});
  nn::NoGradGuard no_grad;
  return normalized_rows(net_.forward(nn::Var(net_.prepare(crops))).value());
}

std::uint64_t CnnTeacher::weights_hash() const {
  const std::uint64_t a = net_.parameters().hash();
  return nn::fnv1a(&a, sizeof a, head_params_.hash());
}

std::vector<std::pair<std::string, nn::Var>> CnnTeacher::named_parameters() const {
  auto out = net_.parameters().entries();
  for (const auto& e : head_params_.entries()) out.push_back(e);
  return out;
}

void CnnTeacher::freeze() {
  net_.parameters().set_trainable("", false);
  head_params_.set_trainable("", false);
  frozen_ = true;
}

}  // namespace clipvs
