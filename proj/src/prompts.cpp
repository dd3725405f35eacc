#include "clipvs/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"
#include "clipvs/losses.hpp"

namespace clipvs {

ObjectPrompts build_object_prompts(const TextEncoder& encoder) {
  ObjectPrompts p;
  p.t_fore = encoder.encode(p.foreground_text);
  p.t_back = encoder.encode(p.background_text);
  for (const nn::Tensor* t : {&p.t_fore, &p.t_back}) {
    double sq = 0;
    for (double v : t->values()) {
      if (!std::isfinite(v)) throw SpecError("object prompts: encoder produced a non-finite value");
      sq += v * v;
    }
    if (sq == 0) throw SpecError("object prompts: encoder produced a zero vector");
  }
  p.encoder_hash = encoder.weights_hash();
  return p;
}

std::vector<TemplatePiece> identity_template(int m) {
  using K = TemplatePiece::Kind;
  std::vector<TemplatePiece> pieces{{K::kWords, "A photo of a", 0}};
  for (int i = 0; i < m; ++i) pieces.push_back({K::kContext, "", i});
  pieces.push_back({K::kWords, "vehicle with", 0});
  pieces.push_back({K::kColor, "", 0});
  pieces.push_back({K::kWords, "color and", 0});
  pieces.push_back({K::kType, "", 0});
  pieces.push_back({K::kWords, "type", 0});
  return pieces;
}

std::string render_template(int m) {
  std::string out;
  for (const auto& p : identity_template(m)) {
    if (!out.empty()) out += ' ';
    out += p.kind == TemplatePiece::Kind::kWords ? p.words : "X";
  }
  return out;
}

IdentityPromptBank IdentityPromptBank::create(int c, int token_dim, nn::Rng& rng, double init_std, int m) {
  if (c < 0 || token_dim <= 0 || m <= 0) throw ContractError("prompt bank: bad sizes");
  IdentityPromptBank b;
  b.num_identities = c;
  b.num_context_tokens = m;
  b.token_dim = token_dim;
  b.context_tokens = nn::Var(nn::Tensor::randn({c, m, token_dim}, init_std, rng), true);
  b.color_tokens = nn::Var(nn::Tensor::randn({c, token_dim}, init_std, rng), true);
  b.type_tokens = nn::Var(nn::Tensor::randn({c, token_dim}, init_std, rng), true);
  b.color_words.assign(static_cast<std::size_t>(c), "");
  b.type_words.assign(static_cast<std::size_t>(c), "");
  return b;
}

std::uint64_t IdentityPromptBank::hash() const {
  std::uint64_t h = nn::fnv1a(&num_identities, sizeof num_identities);
  for (const nn::Tensor* t : {&context_tokens.value(), &color_tokens.value(), &type_tokens.value(), &encoded}) {
    const std::uint64_t th = t->hash();
    h = nn::fnv1a(&th, sizeof th, h);
  }
  for (const auto* words : {&color_words, &type_words})
    for (const auto& w : *words) h = nn::fnv1a(w.data(), w.size(), h ^ 0x1f);
  return h;
}

void IdentityPromptBank::freeze() {
  for (nn::Var* v : {&context_tokens, &color_tokens, &type_tokens}) *v = v->detach();
}

namespace {

void check_index(const IdentityPromptBank& bank, int index) {
  if (index < 0 || index >= bank.num_identities)
    throw ContractError("prompt bank: identity index " + std::to_string(index) + " out of range");
}

const std::string& fixed_word(const std::vector<std::string>& words, int index) {
  static const std::string kNone;
  return static_cast<std::size_t>(index) < words.size() ? words[static_cast<std::size_t>(index)] : kNone;
}

}  // namespace

std::vector<int> prompt_token_ids(const IdentityPromptBank& bank, int index, const TextEncoder& encoder) {
  check_index(bank, index);
  std::vector<int> ids = encoder.tokenize("", true);
  const int end = ids.back();
  ids.pop_back();
  auto append = [&](const std::string& words) {
    for (int id : encoder.tokenize(words, false)) ids.push_back(id);
  };
  for (const auto& p : identity_template(bank.num_context_tokens)) {
    switch (p.kind) {
      case TemplatePiece::Kind::kWords: append(p.words); break;
      case TemplatePiece::Kind::kContext: ids.push_back(-1); break;
      case TemplatePiece::Kind::kColor: {
        const auto& w = fixed_word(bank.color_words, index);
        if (w.empty()) ids.push_back(-1); else append(w);
        break;
      }
      case TemplatePiece::Kind::kType: {
        const auto& w = fixed_word(bank.type_words, index);
        if (w.empty()) ids.push_back(-1); else append(w);
        break;
      }
    }
  }
  ids.push_back(end);
  return ids;
}

nn::Var prompt_token_sequence(const IdentityPromptBank& bank, int index, const TextEncoder& encoder) {
  check_index(bank, index);
  if (encoder.token_dim() != bank.token_dim)
    throw ContractError("prompt bank: token_dim " + std::to_string(bank.token_dim) + " does not match encoder " +
                        std::to_string(encoder.token_dim()));
  const int m = bank.num_context_tokens;
  const auto ids = prompt_token_ids(bank, index, encoder);
  const nn::Var context = nn::reshape(bank.context_tokens, {bank.num_identities * m, bank.token_dim});

  std::vector<nn::Var> parts;
  std::vector<int> run;
  auto flush = [&] {
    if (run.empty()) return;
    parts.emplace_back(encoder.token_embeddings(run));
    run.clear();
  };
  int slot = 0;  // learnable slots appear in order: M context, then color, then type
  const bool fixed_color = !fixed_word(bank.color_words, index).empty();
  for (int id : ids) {
    if (id >= 0) {
      run.push_back(id);
      continue;
    }
    flush();
    int row = index;
    if (slot < m) {
      row = index * m + slot;
      parts.push_back(nn::select_rows(context, std::span<const int>(&row, 1)));
    } else if (slot == m && !fixed_color) {
      parts.push_back(nn::select_rows(bank.color_tokens, std::span<const int>(&row, 1)));
    } else {
      parts.push_back(nn::select_rows(bank.type_tokens, std::span<const int>(&row, 1)));
    }
    ++slot;
  }
  flush();
  return nn::concat_rows(parts);
}

nn::Tensor encode_bank(const IdentityPromptBank& bank, const TextEncoder& encoder) {
  nn::NoGradGuard no_grad;
  const int dim = encoder.output_dim();
  nn::Tensor out({bank.num_identities, dim});
  for (int c = 0; c < bank.num_identities; ++c) {
    const nn::Var row = encoder.encode_embeddings(prompt_token_sequence(bank, c, encoder));
    std::copy_n(row.value().data(), dim, out.data() + static_cast<std::size_t>(c) * dim);
  }
  return out;
}

nn::Var prompt_contrastive_loss(const IdentityPromptBank& bank, const TextEncoder& encoder,
                                const nn::Tensor& image_embeddings, std::span<const int> crop_index,
                                std::span<const int> identities) {
  if (identities.empty()) throw ContractError("prompt contrastive loss: no identities");
  if (static_cast<std::size_t>(image_embeddings.dim(0)) != crop_index.size())
    throw ContractError("prompt contrastive loss: one bank index per image row required");

  std::vector<int> column(static_cast<std::size_t>(bank.num_identities), -1);
  for (std::size_t b = 0; b < identities.size(); ++b) column[static_cast<std::size_t>(identities[b])] = static_cast<int>(b);
  std::vector<int> rows, targets;
  for (std::size_t i = 0; i < crop_index.size(); ++i) {
    const int col = column.at(static_cast<std::size_t>(crop_index[i]));
    if (col < 0) continue;
    rows.push_back(static_cast<int>(i));
    targets.push_back(col);
  }
  if (rows.empty()) throw ContractError("prompt contrastive loss: no crops for the selected identities");

  std::vector<nn::Var> texts;
  for (int c : identities) texts.push_back(encoder.encode_embeddings(prompt_token_sequence(bank, c, encoder)));
  const nn::Var text = nn::l2_normalize_rows(nn::concat_rows(texts));
  const nn::Var images = nn::select_rows(nn::Var(image_embeddings), rows);
  const nn::Var logits = nn::scale(nn::matmul_nt(images, text), encoder.logit_scale());

  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto nb = static_cast<Eigen::Index>(identities.size());
  const nn::RowMatrix z = logits.value().matrix(static_cast<int>(n));
  nn::RowMatrix grad = nn::RowMatrix::Zero(n, nb);

  // image -> text: one positive prompt per crop.
  double i2t = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd g;
    i2t += losses::softmax_cross_entropy(z.row(i), targets[static_cast<std::size_t>(i)], &g);
    grad.row(i) += 0.5 * g / static_cast<double>(n);
  }
  // text -> image: each prompt against all crops, averaged over its positives.
  double t2i = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    std::vector<Eigen::Index> pos;
    for (Eigen::Index i = 0; i < n; ++i)
      if (targets[static_cast<std::size_t>(i)] == b) pos.push_back(i);
    if (pos.empty()) continue;
    const Eigen::VectorXd col = z.col(b);
    const double mx = col.maxCoeff();
    const Eigen::VectorXd e = (col.array() - mx).exp();
    const double lse = std::log(e.sum()) + mx;
    const Eigen::VectorXd p = e / e.sum();
    const double w = 0.5 / (static_cast<double>(nb) * static_cast<double>(pos.size()));
    for (Eigen::Index i : pos) {
      t2i += (lse - col(i)) / static_cast<double>(pos.size());
      grad.col(b) += w * p;
      grad(i, b) -= w;
    }
  }
  const double value = 0.5 * (i2t / static_cast<double>(n) + t2i / static_cast<double>(nb));
  return nn::scalar_with_grads(value, {logits}, {nn::Tensor::from_matrix(grad).reshaped(logits.shape())});
}

PromptTrainResult pretrain_id_tokens(const std::vector<std::vector<cv::Mat>>& crops, const ImageEncoder& image_encoder,
                                     const TextEncoder& text_encoder, const PromptTrainConfig& config) {
  if (config.epochs < 0) throw ContractError("pretrain_id_tokens: negative epoch count");
  if (image_encoder.output_dim() != text_encoder.output_dim())
    throw ContractError("pretrain_id_tokens: image and text encoders disagree on output dimension");
  nn::Rng rng(config.seed);
  PromptTrainResult result;
  const int c_count = static_cast<int>(crops.size());
  result.bank = IdentityPromptBank::create(c_count, text_encoder.token_dim(), rng, config.init_std,
                                           config.num_context_tokens);

  std::vector<cv::Mat> all;
  std::vector<int> crop_index, active;
  for (int c = 0; c < c_count; ++c) {
    const auto& list = crops[static_cast<std::size_t>(c)];
    if (list.empty()) {
      result.excluded.push_back(c + 1);
      continue;
    }
    active.push_back(c);
    for (const auto& m : list) {
      all.push_back(m);
      crop_index.push_back(c);
    }
  }

  if (active.empty()) {
    result.bank.encoded = encode_bank(result.bank, text_encoder);
    return result;
  }
  const nn::Tensor embeddings = image_encoder.embed(all);

  auto full_loss = [&] {
    nn::NoGradGuard no_grad;
    return prompt_contrastive_loss(result.bank, text_encoder, embeddings, crop_index, active).value()[0];
  };
  result.initial_loss = full_loss();

  nn::Sgd opt({{"prompt.context", result.bank.context_tokens},
               {"prompt.color", result.bank.color_tokens},
               {"prompt.type", result.bank.type_tokens}},
              {config.lr, config.momentum, 0.0, 0.0});
  const int batch = config.batch_identities > 0 ? config.batch_identities : static_cast<int>(active.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order = active;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch));
      const std::span<const int> ids(order.data() + start, stop - start);
      opt.zero_grad();
      nn::Var loss = prompt_contrastive_loss(result.bank, text_encoder, embeddings, crop_index, ids);
      if (!std::isfinite(loss.value()[0])) throw TrainingError("pretrain_id_tokens: non-finite contrastive loss");
      loss.backward();
      opt.step();
    }
    result.epoch_losses.push_back(full_loss());
  }
  opt.zero_grad();
  result.bank.encoded = encode_bank(result.bank, text_encoder);
  return result;
}

PromptTrainResult pretrain_id_tokens(const DatasetManifest& train, const std::filesystem::path& image_root,
                                     const ImageEncoder& image_encoder, const TextEncoder& text_encoder,
                                     const PromptTrainConfig& config, int max_crops_per_identity) {
  return pretrain_id_tokens(collect_identity_crops(train, image_root, max_crops_per_identity), image_encoder,
                            text_encoder, config);
}

}  // namespace clipvs
