#pragma once

// Base-model pre-training, prefix-tuning with the base frozen, and a
// finite-difference gradient check for the hand-written backward pass.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pbd/error.hpp"
#include "pbd/model.hpp"
#include "pbd/rng.hpp"
#include "pbd/text.hpp"

namespace pbd {

struct TrainHyper {
  double learning_rate = 0.01;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  LossMask mask = LossMask::output_only;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0) || !(weight_decay > 0) || batch_size == 0 || epochs == 0) {
      throw Error("train hyperparameters must be positive");
    }
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;  // token-weighted mean over each epoch
  std::size_t steps = 0;
};

// Decoupled weight decay Adam.
template <typename T>
class AdamW {
 public:
  AdamW(std::size_t n, const TrainHyper& h) : m_(n, 0.0), v_(n, 0.0), h_(h) {}

  void step(std::vector<T>& params, const std::vector<T>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(h_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(h_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      m_[i] = h_.beta1 * m_[i] + (1.0 - h_.beta1) * g;
      v_[i] = h_.beta2 * v_[i] + (1.0 - h_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      double p = static_cast<double>(params[i]);
      p -= h_.learning_rate * (mhat / (std::sqrt(vhat) + h_.adam_eps) + h_.weight_decay * p);
      params[i] = static_cast<T>(p);
    }
  }

 private:
  std::vector<double> m_, v_;
  TrainHyper h_;
  std::uint64_t t_ = 0;
};

inline std::vector<EncodedPair> encode_dataset(const Vocab& vocab, const Dataset& data,
                                               LossMask mode, std::size_t max_len) {
  std::vector<EncodedPair> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EncodedPair e = encode_pair(vocab, data[i], mode);
    if (e.inputs.size() > max_len) {
      throw Error("sample " + std::to_string(i) + " encodes to " + std::to_string(e.inputs.size()) +
                  " tokens, more than max_len " + std::to_string(max_len));
    }
    out.push_back(std::move(e));
  }
  return out;
}

// Loss and gradient of a batch: token-weighted mean NLL over every masked
// position in the batch.
template <typename T>
double batch_loss_and_grad(const Transformer<T>& net, const PrefixLMParams<T>& p,
                           const std::vector<const EncodedPair*>& batch, bool use_prefix,
                           Gradients<T>* grads, std::size_t* tokens_out = nullptr) {
  std::size_t total = 0;
  for (const auto* e : batch) {
    for (char m : e->mask) total += m ? 1 : 0;
  }
  if (total == 0) throw PreconditionError("batch has no unmasked positions");
  const std::size_t v = p.config.vocab_size;
  const T scale = T(1) / static_cast<T>(total);
  ForwardCache<T> cache;
  std::vector<T> dlogits;
  double sum = 0;
  for (const auto* e : batch) {
    net.forward(p, e->inputs, use_prefix, cache);
    std::size_t count = 0;
    if (grads) dlogits.assign(cache.logits.size(), T(0));
    const double mean = masked_nll<T>(cache.logits, v, e->targets, e->mask,
                                      grads ? dlogits.data() : nullptr, scale, &count);
    sum += mean * static_cast<double>(count);
    if (grads && count) net.backward(p, cache, dlogits.data(), *grads);
  }
  if (tokens_out) *tokens_out = total;
  return sum / static_cast<double>(total);
}

namespace train_detail {

template <typename T>
TrainLog run(PrefixLMParams<T>& p, const std::vector<EncodedPair>& data, const TrainHyper& h,
             bool tune_theta, bool use_prefix, const std::string& stage) {
  h.validate();
  if (data.empty()) throw Error(stage + ": empty training set");
  Transformer<T> net(p.config);
  Gradients<T> g;
  g.want_theta = tune_theta;
  g.want_phi = !tune_theta;
  AdamW<T> opt(tune_theta ? p.theta.size() : p.phi.size(), h);
  const Rng root = Rng(h.seed).derive(stage);
  TrainLog log;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < h.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = root.derive("epoch", e);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_sum = 0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += h.batch_size) {
      std::vector<const EncodedPair*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + h.batch_size); ++k) {
        batch.push_back(&data[order[k]]);
      }
      bool any = false;
      for (const auto* b : batch) {
        for (char m : b->mask) any = any || m;
      }
      if (!any) continue;
      if (tune_theta) g.theta.assign(p.theta.size(), T(0));
      else g.phi.assign(p.phi.size(), T(0));
      std::size_t tokens = 0;
      const double loss = batch_loss_and_grad(net, p, batch, use_prefix, &g, &tokens);
      if (!std::isfinite(loss)) {
        throw Error(stage + ": non-finite loss at epoch " + std::to_string(e + 1) + " step " +
                    std::to_string(log.steps + 1));
      }
      epoch_sum += loss * static_cast<double>(tokens);
      epoch_tokens += tokens;
      if (tune_theta) opt.step(p.theta, g.theta);
      else opt.step(p.phi, g.phi);
      ++log.steps;
    }
    log.epoch_loss.push_back(epoch_tokens ? epoch_sum / static_cast<double>(epoch_tokens) : 0.0);
  }
  return log;
}

}  // namespace train_detail

// Trains theta on "BOS input SEP output EOS" with loss on every token. The
// prefix is not used.
template <typename T>
TrainLog pretrain(PrefixLM<T>& model, const Dataset& corpus, TrainHyper hyper) {
  hyper.mask = LossMask::full;
  auto data = encode_dataset(model.vocab, corpus, hyper.mask, model.config().max_len);
  return train_detail::run(model.params, data, hyper, true, false, "pretrain");
}

// Trains phi only; theta is never written.
template <typename T>
TrainLog prefix_tune(PrefixLM<T>& model, const Dataset& data, const TrainHyper& hyper) {
  if (model.config().n_prefix == 0) throw Error("no prefix to tune");
  auto enc = encode_dataset(model.vocab, data, hyper.mask, model.config().max_len);
  return train_detail::run(model.params, enc, hyper, false, true, "prefix-tune");
}

// Mean masked NLL of a dataset under the model (no gradient).
template <typename T>
double dataset_loss(const PrefixLM<T>& model, const Dataset& data, LossMask mask, bool use_prefix,
                    std::size_t* tokens_out = nullptr) {
  auto enc = encode_dataset(model.vocab, data, mask, model.config().max_len);
  std::vector<const EncodedPair*> all;
  for (const auto& e : enc) all.push_back(&e);
  Transformer<T> net(model.config());
  return batch_loss_and_grad<T>(net, model.params, all, use_prefix, nullptr, tokens_out);
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t probes = 0;
  std::string worst;  // tensor name of the worst probe
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Compares analytic gradients of the batch loss with central differences on
// a random subset of theta and phi entries.
//
// Relative error is |a - n| / max(|a|, |n|, floor): entries whose gradient
// is below the floor are judged on absolute error, since central-difference
// truncation (O(epsilon^2)) dominates a near-zero derivative.
template <typename T>
GradCheckResult grad_check(const PrefixLMParams<T>& params, const std::vector<EncodedPair>& batch,
                           double epsilon, std::size_t n_probes = 200, std::uint64_t seed = 0,
                           double floor = 1e-4) {
  if (batch.empty()) throw PreconditionError("grad_check: empty batch");
  std::vector<const EncodedPair*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  const bool use_prefix = params.config.n_prefix > 0;
  Transformer<T> net(params.config);
  Gradients<T> g;
  g.theta.assign(params.theta.size(), T(0));
  g.phi.assign(params.phi.size(), T(0));
  batch_loss_and_grad(net, params, ptrs, use_prefix, &g);

  PrefixLMParams<T> work = params;
  const ParamLayout layout(params.config);
  Rng rng(seed);
  GradCheckResult res;
  const std::size_t total = params.theta.size() + params.phi.size();
  for (std::size_t k = 0; k < n_probes; ++k) {
    const std::size_t idx = rng.below(total);
    const bool in_phi = idx >= params.theta.size();
    const std::size_t off = in_phi ? idx - params.theta.size() : idx;
    auto& buf = in_phi ? work.phi : work.theta;
    const T orig = buf[off];
    buf[off] = orig + static_cast<T>(epsilon);
    const double up = batch_loss_and_grad<T>(net, work, ptrs, use_prefix, nullptr);
    buf[off] = orig - static_cast<T>(epsilon);
    const double down = batch_loss_and_grad<T>(net, work, ptrs, use_prefix, nullptr);
    buf[off] = orig;
    const double numeric = (up - down) / (2 * epsilon);
    const double analytic = static_cast<double>(in_phi ? g.phi[off] : g.theta[off]);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++res.probes;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
      for (const auto& t : layout.tensors) {
        if (t.in_phi == in_phi && off >= t.offset && off < t.offset + t.size()) res.worst = t.name;
      }
    }
  }
  return res;
}

}  // namespace pbd
