#pragma once

#include "dfkd/nn.hpp"

namespace dfkd {

struct HyperParams {
  double alpha = 5.0;  // log-L2 regularizer weight inside IKD
  double beta = 1.0;   // BNS weight in the generator objective
  double gamma = 0.7;  // SCL weight in the generator objective
  double eta = 1.0;    // pseudo-label cross-entropy weight
  double tau = 10.0;   // SCL temperature

  void validate() const {
    for (double v : {alpha, beta, gamma, eta, tau})
      if (!std::isfinite(v)) throw std::invalid_argument("HyperParams: values must be finite");
    if (tau <= 0) throw std::invalid_argument("HyperParams: tau must be > 0");
    if (alpha < 0 || beta < 0 || gamma < 0 || eta < 0)
      throw std::invalid_argument("HyperParams: weights must be >= 0");
  }
};

enum class IkdMode { full, kl_only, rl2_only };

// Teacher/student penultimate embeddings of the same synthetic batch.
template <class T>
struct RepresentationPair {
  Var<T> z_t;                   // teacher view, [B, D]
  Var<T> z_s;                   // student view mapped to dimension D, [B, D]
  std::vector<int64_t> labels;  // condition labels, length B
};

template <class T>
inline Var<T> l2_normalize_rows(Var<T> x) {
  Var<T> n = sqrt_op(add_scalar(row_sum(mul(x, x)), T(1e-12)));
  return div_colvec(x, n);
}

// ---- BNS: sum_l ||mu_l - mu_l(x)||_2 + ||sigma2_l - sigma2_l(x)||_2 ----

template <class T>
inline Var<T> bns_loss(const BNStatsSnapshot<T>& snapshot, const BatchStats<T>& batch) {
  if (snapshot.layers.size() != batch.layers.size())
    throw std::invalid_argument("bns_loss: layer lists differ in length");
  Var<T> total;
  for (size_t l = 0; l < snapshot.layers.size(); ++l) {
    const auto& ref = snapshot.layers[l];
    const auto& cur = batch.layers[l];
    if (ref.id != cur.id || ref.mu.shape != cur.mean.val().shape)
      throw std::invalid_argument("bns_loss: layer mismatch at '" + ref.id + "'");
    Var<T> dm = sub(cur.mean, constant(ref.mu));
    Var<T> dv = sub(cur.var, constant(ref.sigma2));
    Var<T> term = add(sqrt_op(sum_all(mul(dm, dm))), sqrt_op(sum_all(mul(dv, dv))));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <class T>
inline BatchStats<T> as_batch_stats(const BNStatsSnapshot<T>& s) {
  BatchStats<T> b;
  for (const auto& l : s.layers) b.layers.push_back({l.id, constant(l.mu), constant(l.sigma2)});
  return b;
}

// ---- IKD: batch-mean KL(softmax(t) || softmax(s)) + alpha * log(1+||t-s||) ----

template <class T>
inline Var<T> kl_term(Var<T> t_logits, Var<T> s_logits) {
  check_same_shape(t_logits.val(), s_logits.val(), "kl_term");
  Var<T> lt = log_softmax_rows(t_logits);
  Var<T> ls = log_softmax_rows(s_logits);
  return mean_all(row_sum(mul(exp_op(lt), sub(lt, ls))));
}

template <class T>
inline Var<T> r_l2_term(Var<T> t_logits, Var<T> s_logits) {
  check_same_shape(t_logits.val(), s_logits.val(), "r_l2_term");
  Var<T> d = sub(t_logits, s_logits);
  return mean_all(log1p_op(sqrt_op(row_sum(mul(d, d)))));
}

template <class T>
inline Var<T> ikd_loss(Var<T> t_logits, Var<T> s_logits, T alpha,
                       IkdMode mode = IkdMode::full) {
  switch (mode) {
    case IkdMode::kl_only: return kl_term(t_logits, s_logits);
    case IkdMode::rl2_only: return scale(r_l2_term(t_logits, s_logits), alpha);
    default:
      return add(kl_term(t_logits, s_logits), scale(r_l2_term(t_logits, s_logits), alpha));
  }
}

// ---- pseudo-supervised cross-entropy against condition labels ----

template <class T>
inline Var<T> ce_stage_loss(Var<T> logits, const std::vector<int64_t>& y) {
  if (logits.val().ndim() != 2 ||
      static_cast<int64_t>(y.size()) != logits.val().dim(0))
    throw DimError("ce_stage_loss: need [B,N] logits and B labels");
  Var<T> ls = log_softmax_rows(logits);
  return scale(mean_all(gather_cols(ls, y)), T(-1));
}

// ---- SCL: teacher anchors vs student views, same-class positives ----
//
// sum_i (-1/|P(i)|) sum_{p in P(i)} log[ exp(zt_i . zs_p / tau)
//                                        / sum_{j != i} exp(zt_i . zs_j / tau) ]
// P(i) = student-view indices sharing label y_i, including i itself.
// Rows are L2-normalized before the dot products.

template <class T>
inline Var<T> scl_loss(const RepresentationPair<T>& pair, T tau) {
  const auto& tv = pair.z_t.val();
  const auto& sv = pair.z_s.val();
  if (tv.ndim() != 2 || !tv.same_shape(sv))
    throw DimError("scl_loss: z_t and z_s must both be [B,D]");
  int64_t B = tv.dim(0);
  if (B < 2) throw std::invalid_argument("scl_loss: batch size must be >= 2");
  if (static_cast<int64_t>(pair.labels.size()) != B)
    throw std::invalid_argument("scl_loss: labels length must equal batch size");
  if (tau <= T(0)) throw std::invalid_argument("scl_loss: tau must be > 0");

  Var<T> zt = l2_normalize_rows(pair.z_t);
  Var<T> zs = l2_normalize_rows(pair.z_s);
  // S[i,j] = zt_i . zs_j / tau
  Var<T> s_mat = scale(linear(zt, zs, constant(Tensor<T>::zeros({B}))), T(1) / tau);
  Var<T> lse = offdiag_row_lse(s_mat);          // [B]
  Var<T> centered = sub_colvec(s_mat, lse);     // S[i,j] - lse_i

  Tensor<T> weights({B, B});
  for (int64_t i = 0; i < B; ++i) {
    int64_t cnt = 0;
    for (int64_t p = 0; p < B; ++p)
      if (pair.labels[static_cast<size_t>(p)] == pair.labels[static_cast<size_t>(i)]) ++cnt;
    for (int64_t p = 0; p < B; ++p)
      weights.at2(i, p) =
          pair.labels[static_cast<size_t>(p)] == pair.labels[static_cast<size_t>(i)]
              ? T(1) / static_cast<T>(cnt)
              : T(0);
  }
  return scale(sum_all(mul(centered, constant(std::move(weights)))), T(-1));
}

// ---- composed objectives ----

// Student objective: IKD + eta * CE(student logits, y).
template <class T>
inline Var<T> student_objective(Var<T> t_logits, Var<T> s_logits, const std::vector<int64_t>& y,
                                const HyperParams& hp, IkdMode mode = IkdMode::full) {
  Var<T> obj = ikd_loss(t_logits, s_logits, static_cast<T>(hp.alpha), mode);
  if (hp.eta != 0)
    obj = add(obj, scale(ce_stage_loss(s_logits, y), static_cast<T>(hp.eta)));
  return obj;
}

// Generator objective: -IKD + beta*BNS - gamma*SCL + eta*CE(teacher logits, y).
// The minus signs realize the maximization of IKD and SCL.
template <class T>
inline Var<T> generator_objective(Var<T> t_logits, Var<T> s_logits, const std::vector<int64_t>& y,
                                  const RepresentationPair<T>& pair,
                                  const BNStatsSnapshot<T>& snapshot,
                                  const BatchStats<T>& batch_stats, const HyperParams& hp,
                                  IkdMode mode = IkdMode::full) {
  Var<T> obj = scale(ikd_loss(t_logits, s_logits, static_cast<T>(hp.alpha), mode), T(-1));
  if (hp.beta != 0)
    obj = add(obj, scale(bns_loss(snapshot, batch_stats), static_cast<T>(hp.beta)));
  if (hp.gamma != 0)
    obj = add(obj, scale(scl_loss(pair, static_cast<T>(hp.tau)), -static_cast<T>(hp.gamma)));
  if (hp.eta != 0)
    obj = add(obj, scale(ce_stage_loss(t_logits, y), static_cast<T>(hp.eta)));
  return obj;
}

}  // namespace dfkd
