#ifndef DKPL_PREFGP_HPP
#define DKPL_PREFGP_HPP

// Pairwise-preference Gaussian process on top of the learned latent space.
//
// Likelihood: ordinal probit on utility differences with a symmetric tie band.
// With D = f_a - f_b, s the comparison noise and d the tie tolerance,
//   P(A > B) = Phi((D - d) / s)
//   P(B > A) = Phi((-D - d) / s)
//   P(tie)   = Phi((d - D) / s) - Phi((-d - D) / s)
// Every comparison contributes weight * log P(outcome).
//
// Inference is a Laplace approximation. The negative Hessian of the
// log-likelihood has the low-rank form W = S^T S, where row c of S is
// sqrt(omega_c) (e_a - e_b). All solves go through the C x C matrix
// B = I + S K S^T, which has eigenvalues >= 1 regardless of how close the
// latent points are.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "diffnet.hpp"
#include "errors.hpp"

namespace dkpl {

enum class Outcome { APreferred, BPreferred, Tie };

inline std::string to_string(Outcome o) {
    switch (o) {
    case Outcome::APreferred: return "A";
    case Outcome::BPreferred: return "B";
    case Outcome::Tie: return "TIE";
    }
    return "?";
}

inline Outcome outcome_from_string(const std::string& s) {
    if (s == "A") return Outcome::APreferred;
    if (s == "B") return Outcome::BPreferred;
    if (s == "TIE") return Outcome::Tie;
    throw InputError("unknown outcome '" + s + "' (expected A, B or TIE)");
}

inline Outcome flipped(Outcome o) {
    if (o == Outcome::APreferred) return Outcome::BPreferred;
    if (o == Outcome::BPreferred) return Outcome::APreferred;
    return Outcome::Tie;
}

/// One judgment over candidates `a` and `b`. Inside prefgp the ids index the
/// latent vector f; the orchestrator maps grid ids to training indices.
struct ComparisonRecord {
    std::size_t a = 0;
    std::size_t b = 0;
    Outcome outcome = Outcome::APreferred;
    double weight = 1.0;
};

struct LikelihoodConfig {
    double tie_tolerance = 0.1;
    double noise_scale = 1.0;
    bool tie_support = true;
    bool confidence_weighting = true;

    void validate() const {
        if (!(tie_tolerance >= 0.0) || !std::isfinite(tie_tolerance))
            throw ConfigError("tie_tolerance must be finite and >= 0");
        if (!(noise_scale > 0.0) || !std::isfinite(noise_scale))
            throw ConfigError("noise_scale must be finite and > 0");
    }

    double effective_tolerance() const { return tie_support ? tie_tolerance : 0.0; }
};

struct KernelHyperparams {
    Eigen::VectorXd log_lengthscales;
    double log_amplitude = 0.0;
    double log_jitter = std::log(1e-6);

    static KernelHyperparams defaults(int latent_dim, double lengthscale = 1.0, double amplitude = 1.0,
                                      double jitter = 1e-6) {
        KernelHyperparams hp;
        hp.log_lengthscales = Eigen::VectorXd::Constant(latent_dim, std::log(lengthscale));
        hp.log_amplitude = std::log(amplitude);
        hp.log_jitter = std::log(jitter);
        hp.validate();
        return hp;
    }

    int dim() const { return static_cast<int>(log_lengthscales.size()); }
    double amplitude2() const { return std::exp(2.0 * log_amplitude); }
    double jitter() const { return std::exp(log_jitter); }

    void validate() const {
        if (log_lengthscales.size() < 1 || !log_lengthscales.allFinite() || !std::isfinite(log_amplitude) ||
            !std::isfinite(log_jitter))
            throw ConfigError("kernel hyperparameters must be finite with at least one lengthscale");
        if (jitter() < 1e-10 * (1 - 1e-12)) throw ConfigError("kernel jitter must be >= 1e-10");
    }

    nlohmann::json to_json() const {
        return {{"log_lengthscales", std::vector<double>(log_lengthscales.data(),
                                                         log_lengthscales.data() + log_lengthscales.size())},
                {"log_amplitude", log_amplitude},
                {"log_jitter", log_jitter}};
    }

    static KernelHyperparams from_json(const nlohmann::json& j) {
        KernelHyperparams hp;
        auto ls = j.at("log_lengthscales").get<std::vector<double>>();
        hp.log_lengthscales = Eigen::Map<Eigen::VectorXd>(ls.data(), static_cast<Eigen::Index>(ls.size()));
        hp.log_amplitude = j.at("log_amplitude").get<double>();
        hp.log_jitter = j.at("log_jitter").get<double>();
        hp.validate();
        return hp;
    }
};

// ---------------------------------------------------------------------------
// Standard normal helpers

namespace normal {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

inline double pdf(double x) { return std::exp(-0.5 * x * x - kLogSqrt2Pi); }
inline double log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }
inline double cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double log_cdf(double x) {
    if (x > 0.0) return std::log1p(-0.5 * std::erfc(x / std::sqrt(2.0)));
    if (x > -37.0) return std::log(0.5 * std::erfc(-x / std::sqrt(2.0)));
    const double x2 = x * x;
    return -0.5 * x2 - std::log(-x) - kLogSqrt2Pi + std::log1p(-1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2));
}

/// pdf(x) / cdf(x)
inline double mills(double x) { return std::exp(log_pdf(x) - log_cdf(x)); }

} // namespace normal

/// log P, d/dD log P and d2/dD2 log P for one comparison as a function of
/// D = f_a - f_b. `tol` is the effective tie tolerance.
struct ComparisonTerm {
    double log_p = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

inline ComparisonTerm comparison_term(double diff, Outcome outcome, double tol, double s) {
    ComparisonTerm t;
    switch (outcome) {
    case Outcome::APreferred: {
        const double u = (diff - tol) / s;
        const double lam = normal::mills(u);
        t.log_p = normal::log_cdf(u);
        t.d1 = lam / s;
        t.d2 = -lam * (u + lam) / (s * s);
        break;
    }
    case Outcome::BPreferred: {
        const double v = (-diff - tol) / s;
        const double lam = normal::mills(v);
        t.log_p = normal::log_cdf(v);
        t.d1 = -lam / s;
        t.d2 = -lam * (v + lam) / (s * s);
        break;
    }
    case Outcome::Tie: {
        // Symmetric in D; evaluate at |D| and flip the odd derivative.
        const double sign = diff < 0.0 ? -1.0 : 1.0;
        const double ad = std::abs(diff);
        const double lo = (-tol - ad) / s;
        const double hi = (tol - ad) / s;
        const double log_hi = normal::log_cdf(hi);
        const double log_lo = normal::log_cdf(lo);
        const double log_z = log_hi + std::log1p(-std::exp(log_lo - log_hi));
        const double r_lo = std::exp(normal::log_pdf(lo) - log_z);
        const double r_hi = std::exp(normal::log_pdf(hi) - log_z);
        const double d1 = (r_lo - r_hi) / s;
        t.log_p = log_z;
        t.d1 = sign * d1;
        t.d2 = (lo * r_lo - hi * r_hi) / (s * s) - d1 * d1;
        break;
    }
    }
    return t;
}

/// {P(A > B), P(B > A), P(tie)} for a utility difference. The tie mass is the
/// probability of the band, computed independently of the other two.
inline std::array<double, 3> outcome_probabilities(double diff, double tol, double s) {
    const double pa = normal::cdf((diff - tol) / s);
    const double pb = normal::cdf((-diff - tol) / s);
    const double pt = normal::cdf((tol - diff) / s) - normal::cdf((-tol - diff) / s);
    return {pa, pb, pt};
}

namespace detail {

inline void check_comparisons(std::size_t n, const std::vector<ComparisonRecord>& comps, const LikelihoodConfig& cfg) {
    for (const auto& c : comps) {
        if (c.a >= n || c.b >= n)
            throw InputError("comparison references index " + std::to_string(std::max(c.a, c.b)) +
                             " outside utility vector of length " + std::to_string(n));
        if (c.a == c.b) throw InputError("comparison of a candidate with itself");
        if (!(c.weight >= 0.0 && c.weight <= 1.0)) throw InputError("comparison weight must lie in [0, 1]");
        if (c.outcome == Outcome::Tie) {
            if (!cfg.tie_support) throw IngestionError("TIE outcome received while tie_support_enabled is false");
            if (cfg.tie_tolerance <= 0.0) throw IngestionError("TIE outcome requires tie_tolerance > 0");
        }
    }
}

inline double weight_of(const ComparisonRecord& c, const LikelihoodConfig& cfg) {
    return cfg.confidence_weighting ? c.weight : 1.0;
}

} // namespace detail

inline double comparison_log_likelihood(const Eigen::VectorXd& f, const std::vector<ComparisonRecord>& comps,
                                        const LikelihoodConfig& cfg) {
    cfg.validate();
    detail::check_comparisons(static_cast<std::size_t>(f.size()), comps, cfg);
    const double tol = cfg.effective_tolerance();
    double total = 0.0;
    for (const auto& c : comps)
        total += detail::weight_of(c, cfg) * comparison_term(f[c.a] - f[c.b], c.outcome, tol, cfg.noise_scale).log_p;
    return total;
}

/// Value, gradient w.r.t. f, and the per-comparison curvature
/// omega_c = -w_c d2 log P_c (so that W = sum_c omega_c (e_a - e_b)(e_a - e_b)^T).
struct LikelihoodEval {
    double value = 0.0;
    Eigen::VectorXd grad;
    Eigen::VectorXd omega;
};

inline LikelihoodEval evaluate_likelihood(const Eigen::VectorXd& f, const std::vector<ComparisonRecord>& comps,
                                          const LikelihoodConfig& cfg) {
    const double tol = cfg.effective_tolerance();
    LikelihoodEval ev;
    ev.grad = Eigen::VectorXd::Zero(f.size());
    ev.omega.resize(static_cast<Eigen::Index>(comps.size()));
    for (std::size_t k = 0; k < comps.size(); ++k) {
        const auto& c = comps[k];
        const double w = detail::weight_of(c, cfg);
        const auto t = comparison_term(f[c.a] - f[c.b], c.outcome, tol, cfg.noise_scale);
        ev.value += w * t.log_p;
        ev.grad[c.a] += w * t.d1;
        ev.grad[c.b] -= w * t.d1;
        ev.omega[k] = std::max(0.0, -w * t.d2);
    }
    return ev;
}

inline Eigen::VectorXd comparison_log_likelihood_grad(const Eigen::VectorXd& f,
                                                      const std::vector<ComparisonRecord>& comps,
                                                      const LikelihoodConfig& cfg) {
    cfg.validate();
    detail::check_comparisons(static_cast<std::size_t>(f.size()), comps, cfg);
    return evaluate_likelihood(f, comps, cfg).grad;
}

/// Dense negative Hessian W of the log-likelihood.
inline Eigen::MatrixXd comparison_neg_hessian(const Eigen::VectorXd& f, const std::vector<ComparisonRecord>& comps,
                                              const LikelihoodConfig& cfg) {
    cfg.validate();
    detail::check_comparisons(static_cast<std::size_t>(f.size()), comps, cfg);
    const auto ev = evaluate_likelihood(f, comps, cfg);
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(f.size(), f.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
        const auto a = static_cast<Eigen::Index>(comps[k].a), b = static_cast<Eigen::Index>(comps[k].b);
        const double o = ev.omega[static_cast<Eigen::Index>(k)];
        W(a, a) += o;
        W(b, b) += o;
        W(a, b) -= o;
        W(b, a) -= o;
    }
    return W;
}

// ---------------------------------------------------------------------------
// Kernel

/// Squared-exponential ARD cross-kernel between rows of z1 and rows of z2.
inline Eigen::MatrixXd cross_kernel(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& z2, const KernelHyperparams& hp) {
    if (z1.cols() != hp.dim() || z2.cols() != hp.dim())
        throw InputError("latent dimension does not match kernel lengthscales");
    const Eigen::ArrayXd inv_ls2 = (-2.0 * hp.log_lengthscales.array()).exp();
    const double amp2 = hp.amplitude2();
    Eigen::MatrixXd K(z1.rows(), z2.rows());
    for (Eigen::Index i = 0; i < z1.rows(); ++i)
        for (Eigen::Index j = 0; j < z2.rows(); ++j) {
            double q = 0.0;
            for (Eigen::Index d = 0; d < z1.cols(); ++d) {
                const double t = z1(i, d) - z2(j, d);
                q += t * t * inv_ls2[d];
            }
            K(i, j) = amp2 * std::exp(-0.5 * q);
        }
    return K;
}

/// Gram matrix of one latent set, jitter added on the diagonal.
inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& z, const KernelHyperparams& hp) {
    if (z.cols() != hp.dim()) throw InputError("latent dimension does not match kernel lengthscales");
    const Eigen::Index n = z.rows();
    Eigen::MatrixXd K(n, n);
    const double amp2 = hp.amplitude2();
    const Eigen::ArrayXd inv_ls2 = (-2.0 * hp.log_lengthscales.array()).exp();
    for (Eigen::Index i = 0; i < n; ++i) {
        K(i, i) = amp2 + hp.jitter();
        for (Eigen::Index j = 0; j < i; ++j) {
            const double q = ((z.row(i) - z.row(j)).array().square().transpose() * inv_ls2).sum();
            K(i, j) = K(j, i) = amp2 * std::exp(-0.5 * q);
        }
    }
    return K;
}

inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& z2,
                                     const KernelHyperparams& hp) {
    return cross_kernel(z1, z2, hp);
}

// ---------------------------------------------------------------------------
// Laplace inference

/// W = S^T S with S stored sparsely: two non-zeros per comparison row.
struct PairFactor {
    std::vector<Eigen::Index> ia, ib;
    Eigen::VectorXd scale; // sqrt(omega)

    static PairFactor from(const std::vector<ComparisonRecord>& comps, const Eigen::VectorXd& omega) {
        PairFactor s;
        s.ia.reserve(comps.size());
        s.ib.reserve(comps.size());
        for (const auto& c : comps) {
            s.ia.push_back(static_cast<Eigen::Index>(c.a));
            s.ib.push_back(static_cast<Eigen::Index>(c.b));
        }
        s.scale = omega.array().sqrt();
        return s;
    }

    Eigen::Index rows() const { return scale.size(); }

    // S x for a vector or for each column of a matrix
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd out(rows(), x.cols());
        for (Eigen::Index c = 0; c < rows(); ++c) out.row(c) = scale[c] * (x.row(ia[c]) - x.row(ib[c]));
        return out;
    }

    // S^T y
    Eigen::VectorXd apply_t(const Eigen::VectorXd& y, Eigen::Index n) const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
        for (Eigen::Index c = 0; c < rows(); ++c) {
            out[ia[c]] += scale[c] * y[c];
            out[ib[c]] -= scale[c] * y[c];
        }
        return out;
    }

    // S K S^T
    Eigen::MatrixXd sandwich(const Eigen::MatrixXd& K) const {
        const Eigen::Index C = rows();
        Eigen::MatrixXd out(C, C);
        for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index d = 0; d <= c; ++d) {
                const double v = K(ia[c], ia[d]) - K(ia[c], ib[d]) - K(ib[c], ia[d]) + K(ib[c], ib[d]);
                out(c, d) = out(d, c) = scale[c] * scale[d] * v;
            }
        return out;
    }

    // S^T M S for a C x C matrix M
    Eigen::MatrixXd outer(const Eigen::MatrixXd& M, Eigen::Index n) const {
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
        for (Eigen::Index c = 0; c < rows(); ++c)
            for (Eigen::Index d = 0; d < rows(); ++d) {
                const double v = scale[c] * scale[d] * M(c, d);
                out(ia[c], ia[d]) += v;
                out(ia[c], ib[d]) -= v;
                out(ib[c], ia[d]) -= v;
                out(ib[c], ib[d]) += v;
            }
        return out;
    }
};

/// Raised when Newton fails to reach the gradient tolerance.
class LaplaceNonConvergence : public NumericalError {
public:
    LaplaceNonConvergence(int iterations, double grad_norm, Eigen::VectorXd last)
        : NumericalError("Laplace mode search did not converge after " + std::to_string(iterations) +
                             " iterations (gradient inf-norm " + std::to_string(grad_norm) + ")",
                         iterations, grad_norm),
          last_iterate(std::move(last)) {}

    Eigen::VectorXd last_iterate;
};

struct LaplaceOptions {
    int max_iterations = 100;
    double grad_tolerance = 1e-6;
};

struct LaplaceFit {
    Eigen::VectorXd f;     // posterior mode
    Eigen::VectorXd alpha; // K^{-1} f
    PairFactor S;
    Eigen::MatrixXd B_chol; // lower Cholesky factor of I + S K S^T
    double log_lik = 0.0;
    double log_det_B = 0.0;
    int iterations = 0;
    double grad_norm = 0.0;

    /// log q(y) = log p(y | f) - f^T K^{-1} f / 2 - log det(I + K W) / 2
    double evidence() const { return log_lik - 0.5 * f.dot(alpha) - 0.5 * log_det_B; }
};

/// Damped Newton on Psi(f) = log p(y | f) - f^T K^{-1} f / 2, parametrised by
/// alpha with f = K alpha so that K is never inverted.
inline LaplaceFit fit_laplace(const Eigen::MatrixXd& K, const std::vector<ComparisonRecord>& comps,
                              const LikelihoodConfig& cfg, const Eigen::VectorXd* alpha_init = nullptr,
                              const LaplaceOptions& opt = {}) {
    cfg.validate();
    if (comps.empty()) throw InputError("fit_laplace needs at least one comparison");
    if (K.rows() != K.cols()) throw InputError("Gram matrix must be square");
    const Eigen::Index n = K.rows();
    detail::check_comparisons(static_cast<std::size_t>(n), comps, cfg);

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
    if (alpha_init && alpha_init->size() == n && alpha_init->allFinite()) alpha = *alpha_init;
    Eigen::VectorXd f = K * alpha;
    LikelihoodEval ev = evaluate_likelihood(f, comps, cfg);
    double psi = ev.value - 0.5 * alpha.dot(f);

    LaplaceFit out;
    int it = 0;
    double gnorm = (ev.grad - alpha).lpNorm<Eigen::Infinity>();
    while (!(gnorm <= opt.grad_tolerance)) {
        if (it >= opt.max_iterations || !std::isfinite(gnorm)) throw LaplaceNonConvergence(it, gnorm, f);
        const PairFactor S = PairFactor::from(comps, ev.omega);
        Eigen::MatrixXd B = S.sandwich(K);
        B.diagonal().array() += 1.0;
        Eigen::LLT<Eigen::MatrixXd> llt(B);
        // Newton increment from the residual: (I + W K)^{-1} r = r - S^T B^{-1} S K r.
        const Eigen::VectorXd r = ev.grad - alpha;
        const Eigen::VectorXd step = r - S.apply_t(llt.solve(S.apply(K * r)), n);

        double t = 1.0;
        bool accepted = false;
        for (int half = 0; half < 40; ++half, t *= 0.5) {
            const Eigen::VectorXd a_try = alpha + t * step;
            const Eigen::VectorXd f_try = K * a_try;
            LikelihoodEval ev_try = evaluate_likelihood(f_try, comps, cfg);
            const double psi_try = ev_try.value - 0.5 * a_try.dot(f_try);
            const double g_try = (ev_try.grad - a_try).lpNorm<Eigen::Infinity>();
            // Ascent, or a smaller gradient with psi flat to roundoff.
            const double slack = 1.0 + std::abs(psi);
            if (std::isfinite(psi_try) &&
                (psi_try >= psi - 1e-12 * slack || (g_try < gnorm && psi_try >= psi - 1e-9 * slack))) {
                alpha = a_try;
                f = f_try;
                ev = std::move(ev_try);
                psi = psi_try;
                accepted = true;
                break;
            }
        }
        ++it;
        gnorm = (ev.grad - alpha).lpNorm<Eigen::Infinity>();
        if (!accepted) throw LaplaceNonConvergence(it, gnorm, f);
    }

    out.f = f;
    out.alpha = alpha;
    out.S = PairFactor::from(comps, ev.omega);
    Eigen::MatrixXd B = out.S.sandwich(K);
    B.diagonal().array() += 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(B);
    if (llt.info() != Eigen::Success) throw NumericalError("I + S K S^T is not positive definite", it, gnorm);
    out.B_chol = llt.matrixL();
    out.log_det_B = 2.0 * out.B_chol.diagonal().array().log().sum();
    out.log_lik = ev.value;
    out.iterations = it;
    out.grad_norm = gnorm;
    return out;
}

// ---------------------------------------------------------------------------
// Evidence and its gradient

/// Gradient of the Laplace evidence with the mode held fixed:
/// d/dK = (alpha alpha^T - S^T B^{-1} S) / 2.
inline Eigen::MatrixXd evidence_grad_wrt_gram(const LaplaceFit& fit) {
    const Eigen::Index n = fit.f.size();
    const Eigen::Index C = fit.S.rows();
    Eigen::MatrixXd Binv = Eigen::MatrixXd::Identity(C, C);
    fit.B_chol.triangularView<Eigen::Lower>().solveInPlace(Binv);
    fit.B_chol.triangularView<Eigen::Lower>().transpose().solveInPlace(Binv);
    return 0.5 * (fit.alpha * fit.alpha.transpose() - fit.S.outer(Binv, n));
}

/// Gradients of the evidence with respect to kernel hyperparameters.
/// Layout: [log_lengthscales..., log_amplitude, log_jitter].
struct KernelGrad {
    Eigen::VectorXd hp;
    Eigen::MatrixXd latent; // n x d
};

inline KernelGrad chain_kernel_grad(const Eigen::MatrixXd& G, const Eigen::MatrixXd& z, const KernelHyperparams& hp) {
    const Eigen::Index n = z.rows(), d = z.cols();
    const Eigen::ArrayXd inv_ls2 = (-2.0 * hp.log_lengthscales.array()).exp();
    const double amp2 = hp.amplitude2();
    KernelGrad out;
    out.hp = Eigen::VectorXd::Zero(d + 2);
    out.latent = Eigen::MatrixXd::Zero(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.hp[d] += G(i, i) * 2.0 * amp2;
        for (Eigen::Index j = 0; j < i; ++j) {
            const Eigen::ArrayXd diff = (z.row(i) - z.row(j)).transpose().array();
            const double k = amp2 * std::exp(-0.5 * (diff.square() * inv_ls2).sum());
            const double gk = (G(i, j) + G(j, i)) * k;
            out.hp[d] += 2.0 * gk;
            out.hp.head(d).array() += gk * diff.square() * inv_ls2;
            const Eigen::RowVectorXd dz = (-gk * diff * inv_ls2).matrix().transpose();
            out.latent.row(i) += dz;
            out.latent.row(j) -= dz;
        }
    }
    out.hp[d + 1] = G.trace() * hp.jitter();
    return out;
}

struct EvidenceResult {
    double value = 0.0;
    Eigen::VectorXd grad_net;
    Eigen::VectorXd grad_hp; // [log_lengthscales..., log_amplitude, log_jitter]
    LaplaceFit fit;
    Eigen::MatrixXd latents;
    Eigen::MatrixXd gram;
};

/// Laplace evidence of the comparisons given the network and kernel, with the
/// gradient propagated by reverse accumulation through kernel and network.
/// `inputs` holds one flattened training patch per row.
inline EvidenceResult approx_marginal_log_likelihood(const NetworkParams& net, const KernelHyperparams& hp,
                                                     const Eigen::MatrixXd& inputs,
                                                     const std::vector<ComparisonRecord>& comps,
                                                     const LikelihoodConfig& cfg,
                                                     const Eigen::VectorXd* alpha_init = nullptr,
                                                     bool with_gradient = true) {
    EvidenceResult r;
    r.latents = forward_batch(net, inputs);
    r.gram = kernel_matrix(r.latents, hp);
    r.fit = fit_laplace(r.gram, comps, cfg, alpha_init);
    r.value = r.fit.evidence();
    if (with_gradient) {
        const Eigen::MatrixXd G = evidence_grad_wrt_gram(r.fit);
        const KernelGrad kg = chain_kernel_grad(G, r.latents, hp);
        r.grad_hp = kg.hp;
        r.grad_net = backward_batch(net, inputs, kg.latent);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Posterior and prediction

struct PosteriorState {
    std::vector<std::size_t> training_ids; // caller's candidate ids, one per row of latents
    Eigen::MatrixXd latents;               // n x d training latents
    Eigen::VectorXd f;
    Eigen::VectorXd alpha;
    PairFactor S;
    Eigen::MatrixXd B_chol;
    KernelHyperparams hp;
    NetworkParams net;
    double evidence = 0.0;
};

inline PosteriorState make_posterior(const NetworkParams& net, const KernelHyperparams& hp,
                                     const EvidenceResult& ev, std::vector<std::size_t> ids) {
    PosteriorState p;
    p.training_ids = std::move(ids);
    p.latents = ev.latents;
    p.f = ev.fit.f;
    p.alpha = ev.fit.alpha;
    p.S = ev.fit.S;
    p.B_chol = ev.fit.B_chol;
    p.hp = hp;
    p.net = net;
    p.evidence = ev.value;
    return p;
}

struct Prediction {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
    int clamped = 0; // variances that dipped below -1e-10 before clamping
};

/// Laplace predictive mean k*^T alpha and variance k** - k*^T S^T B^{-1} S k*.
inline Prediction predict_latent(const PosteriorState& post, const Eigen::MatrixXd& zstar) {
    const Eigen::MatrixXd Kx = cross_kernel(zstar, post.latents, post.hp); // m x n
    Prediction out;
    out.mean = Kx * post.alpha;
    Eigen::MatrixXd V = post.S.apply(Kx.transpose()); // C x m
    post.B_chol.triangularView<Eigen::Lower>().solveInPlace(V);
    out.variance = (post.hp.amplitude2() - V.colwise().squaredNorm().array()).matrix().transpose();
    for (Eigen::Index i = 0; i < out.variance.size(); ++i) {
        if (out.variance[i] < 0.0) {
            if (out.variance[i] < -1e-10) ++out.clamped;
            out.variance[i] = 0.0;
        }
    }
    return out;
}

inline Prediction predict_inputs(const PosteriorState& post, const Eigen::MatrixXd& inputs) {
    return predict_latent(post, forward_batch(post.net, inputs));
}

inline Prediction predict_utility(const PosteriorState& post, const std::vector<PatchTensor>& candidates) {
    if (candidates.empty()) throw InputError("predict_utility needs at least one candidate");
    return predict_inputs(post, stack_patches(candidates));
}

// ---------------------------------------------------------------------------
// Joint training

struct TrainOptions {
    int epochs = 1000;
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double min_log_lengthscale = -5.0;
    double max_log_lengthscale = 5.0;
    bool train_jitter = false;
};

/// Network and kernel, plus the posterior from the last fit.
struct PrefModel {
    NetworkParams net;
    KernelHyperparams hp;
    std::optional<PosteriorState> posterior;
};

/// Non-finite objective during training; carries the parameters at that epoch.
class TrainingAborted : public NumericalError {
public:
    TrainingAborted(int epoch, Eigen::VectorXd params)
        : NumericalError("non-finite objective at epoch " + std::to_string(epoch)), epoch(epoch),
          snapshot(std::move(params)) {}

    int epoch;
    Eigen::VectorXd snapshot;
};

struct TrainResult {
    PrefModel model;
    double objective = 0.0;                  // -evidence at the returned parameters
    std::vector<double> objective_trace;     // one entry per epoch, before its update
};

/// Adam on -evidence over (network, kernel hyperparameters), warm-started from
/// `model`. `alpha_init` seeds the first Laplace fit; later epochs reuse the
/// previous mode.
inline TrainResult train_joint(const PrefModel& model, const Eigen::MatrixXd& inputs,
                               const std::vector<ComparisonRecord>& comps, const LikelihoodConfig& cfg,
                               const TrainOptions& opt, const std::vector<std::size_t>& training_ids,
                               const Eigen::VectorXd* alpha_init = nullptr) {
    if (opt.epochs < 1) throw ConfigError("train_joint needs epochs >= 1");
    if (comps.empty()) throw InputError("train_joint needs at least one comparison");
    if (static_cast<std::size_t>(inputs.rows()) != training_ids.size())
        throw InputError("one training id per input row required");

    TrainResult res;
    res.model = model;
    NetworkParams& net = res.model.net;
    KernelHyperparams& hp = res.model.hp;
    const Eigen::Index n_net = static_cast<Eigen::Index>(net.size());
    const Eigen::Index d = hp.dim();
    const Eigen::Index n_hp = d + (opt.train_jitter ? 2 : 1);

    auto pack = [&]() {
        Eigen::VectorXd th(n_net + n_hp);
        th.head(n_net) = net.flat();
        th.segment(n_net, d) = hp.log_lengthscales;
        th[n_net + d] = hp.log_amplitude;
        if (opt.train_jitter) th[n_net + d + 1] = hp.log_jitter;
        return th;
    };
    auto unpack = [&](const Eigen::VectorXd& th) {
        net.assign(th.head(n_net));
        hp.log_lengthscales = th.segment(n_net, d);
        hp.log_amplitude = th[n_net + d];
        if (opt.train_jitter) hp.log_jitter = std::max(th[n_net + d + 1], std::log(1e-10));
    };

    Eigen::VectorXd theta = pack();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd warm;
    if (alpha_init) warm = *alpha_init;
    res.objective_trace.reserve(static_cast<std::size_t>(opt.epochs));

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        EvidenceResult ev = approx_marginal_log_likelihood(net, hp, inputs, comps, cfg, warm.size() ? &warm : nullptr);
        if (!std::isfinite(ev.value) || !ev.grad_net.allFinite() || !ev.grad_hp.allFinite())
            throw TrainingAborted(epoch, theta);
        res.objective_trace.push_back(-ev.value);
        warm = ev.fit.alpha;

        Eigen::VectorXd g(theta.size());
        g.head(n_net) = -ev.grad_net;
        g.segment(n_net, d + 1) = -ev.grad_hp.head(d + 1);
        if (opt.train_jitter) g[n_net + d + 1] = -ev.grad_hp[d + 1];

        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(opt.beta1, epoch);
        const double bc2 = 1.0 - std::pow(opt.beta2, epoch);
        theta.array() -= opt.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt.eps);
        theta.segment(n_net, d) =
            theta.segment(n_net, d).cwiseMax(opt.min_log_lengthscale).cwiseMin(opt.max_log_lengthscale);
        unpack(theta);
    }

    EvidenceResult final_ev = approx_marginal_log_likelihood(net, hp, inputs, comps, cfg,
                                                             warm.size() ? &warm : nullptr, false);
    if (!std::isfinite(final_ev.value)) throw TrainingAborted(opt.epochs, theta);
    res.objective = -final_ev.value;
    res.model.posterior = make_posterior(net, hp, final_ev, training_ids);
    return res;
}

} // namespace dkpl

#endif
