#pragma once

// Reverse-mode autodiff over dense double matrices. Every forward pass builds
// a fresh Tape; backward() walks the nodes in reverse creation order and
// accumulates parameter gradients into tape-local buffers that are flushed
// into the ParamStore afterwards (episodes on separate tapes can therefore
// run concurrently and flush in a fixed order).

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "atd/common.hpp"
#include "atd/params.hpp"

namespace atd::nn {

using ValueId = std::int32_t;

class Tape {
  public:
    explicit Tape(ParamStore* store = nullptr, bool grad = true)
        : store_(store), grad_enabled_(grad) {
        nodes_.reserve(1024);
    }

    bool grad_enabled() const { return grad_enabled_; }
    ParamStore* store() const { return store_; }

    const Mat& val(ValueId id) const { return nodes_[id].val; }
    const Mat& grad(ValueId id) const { return nodes_[id].grad; }
    Eigen::Index rows(ValueId id) const { return nodes_[id].val.rows(); }
    Eigen::Index cols(ValueId id) const { return nodes_[id].val.cols(); }
    std::size_t size() const { return nodes_.size(); }

    // ---- leaves ----

    ValueId input(Mat v) { return push(std::move(v), {}); }

    ValueId param(const std::string& name) {
        require(store_ != nullptr, "tape has no parameter store");
        Param& p = store_->get(name);
        ValueId id = push(p.value, {});
        if (grad_enabled_) {
            Param* pp = &p;
            nodes_[id].back = [id, pp](Tape& t) { t.param_grads_[pp] += t.nodes_[id].grad; };
            param_grads_.try_emplace(pp, Mat::Zero(p.value.rows(), p.value.cols()));
        }
        return id;
    }

    // ---- arithmetic ----

    ValueId add(ValueId a, ValueId b) {
        check_same_shape(a, b, "add");
        ValueId id = push(nodes_[a].val + nodes_[b].val, [a, b](Tape& t, ValueId out) {
            t.accum(a, t.nodes_[out].grad);
            t.accum(b, t.nodes_[out].grad);
        });
        return id;
    }

    ValueId sub(ValueId a, ValueId b) {
        check_same_shape(a, b, "sub");
        return push(nodes_[a].val - nodes_[b].val, [a, b](Tape& t, ValueId out) {
            t.accum(a, t.nodes_[out].grad);
            t.accum(b, -t.nodes_[out].grad);
        });
    }

    ValueId scale(ValueId a, double c) {
        return push(nodes_[a].val * c, [a, c](Tape& t, ValueId out) {
            t.accum(a, c * t.nodes_[out].grad);
        });
    }

    ValueId matmul(ValueId a, ValueId b) {
        require(cols(a) == rows(b), "matmul: inner dims ", cols(a), " vs ", rows(b));
        return push(nodes_[a].val * nodes_[b].val, [a, b](Tape& t, ValueId out) {
            const Mat& g = t.nodes_[out].grad;
            t.accum(a, g * t.nodes_[b].val.transpose());
            t.accum(b, t.nodes_[a].val.transpose() * g);
        });
    }

    ValueId hadamard(ValueId a, ValueId b) {
        check_same_shape(a, b, "hadamard");
        return push(nodes_[a].val.cwiseProduct(nodes_[b].val), [a, b](Tape& t, ValueId out) {
            const Mat& g = t.nodes_[out].grad;
            t.accum(a, g.cwiseProduct(t.nodes_[b].val));
            t.accum(b, g.cwiseProduct(t.nodes_[a].val));
        });
    }

    /// out = s(0,0) * a, where s is a 1x1 node (e.g. a scalar parameter).
    ValueId scalar_mul(ValueId s, ValueId a) {
        require(rows(s) == 1 && cols(s) == 1, "scalar_mul: scalar must be 1x1");
        return push(nodes_[s].val(0, 0) * nodes_[a].val, [s, a](Tape& t, ValueId out) {
            const Mat& g = t.nodes_[out].grad;
            Mat gs(1, 1);
            gs(0, 0) = g.cwiseProduct(t.nodes_[a].val).sum();
            t.accum(s, gs);
            t.accum(a, t.nodes_[s].val(0, 0) * g);
        });
    }

    ValueId transpose(ValueId a) {
        return push(nodes_[a].val.transpose(), [a](Tape& t, ValueId out) {
            t.accum(a, t.nodes_[out].grad.transpose());
        });
    }

    // ---- shape ops ----

    ValueId concat_rows(const std::vector<ValueId>& parts) {
        require(!parts.empty(), "concat_rows: empty");
        Eigen::Index c = cols(parts[0]), r = 0;
        for (ValueId p : parts) {
            require(cols(p) == c, "concat_rows: column mismatch");
            r += rows(p);
        }
        Mat out(r, c);
        Eigen::Index at = 0;
        for (ValueId p : parts) {
            out.middleRows(at, rows(p)) = nodes_[p].val;
            at += rows(p);
        }
        std::vector<ValueId> ps = parts;
        return push(std::move(out), [ps](Tape& t, ValueId out_id) {
            Eigen::Index at = 0;
            for (ValueId p : ps) {
                const Eigen::Index n = t.rows(p);
                t.accum(p, t.nodes_[out_id].grad.middleRows(at, n));
                at += n;
            }
        });
    }

    ValueId slice_rows(ValueId a, Eigen::Index r0, Eigen::Index n) {
        require(r0 >= 0 && r0 + n <= rows(a), "slice_rows out of range");
        return push(nodes_[a].val.middleRows(r0, n), [a, r0, n](Tape& t, ValueId out) {
            if (t.nodes_[a].grad.size() == 0)
                t.nodes_[a].grad = Mat::Zero(t.rows(a), t.cols(a));
            t.nodes_[a].grad.middleRows(r0, n) += t.nodes_[out].grad;
        });
    }

    ValueId slice_cols(ValueId a, Eigen::Index c0, Eigen::Index n) {
        require(c0 >= 0 && c0 + n <= cols(a), "slice_cols out of range");
        return push(nodes_[a].val.middleCols(c0, n), [a, c0, n](Tape& t, ValueId out) {
            if (t.nodes_[a].grad.size() == 0)
                t.nodes_[a].grad = Mat::Zero(t.rows(a), t.cols(a));
            t.nodes_[a].grad.middleCols(c0, n) += t.nodes_[out].grad;
        });
    }

    ValueId concat_cols(const std::vector<ValueId>& parts) {
        require(!parts.empty(), "concat_cols: empty");
        Eigen::Index r = rows(parts[0]), c = 0;
        for (ValueId p : parts) {
            require(rows(p) == r, "concat_cols: row mismatch");
            c += cols(p);
        }
        Mat out(r, c);
        Eigen::Index at = 0;
        for (ValueId p : parts) {
            out.middleCols(at, cols(p)) = nodes_[p].val;
            at += cols(p);
        }
        std::vector<ValueId> ps = parts;
        return push(std::move(out), [ps](Tape& t, ValueId out_id) {
            Eigen::Index at = 0;
            for (ValueId p : ps) {
                const Eigen::Index n = t.cols(p);
                t.accum(p, t.nodes_[out_id].grad.middleCols(at, n));
                at += n;
            }
        });
    }

    /// Repeats a 1xd row n times.
    ValueId broadcast_row(ValueId a, Eigen::Index n) {
        require(rows(a) == 1, "broadcast_row: input must be 1xd");
        return push(nodes_[a].val.replicate(n, 1), [a](Tape& t, ValueId out) {
            t.accum(a, t.nodes_[out].grad.colwise().sum());
        });
    }

    ValueId mean_rows(ValueId a) {
        const double inv = 1.0 / static_cast<double>(rows(a));
        Mat out = nodes_[a].val.colwise().mean();
        return push(std::move(out), [a, inv](Tape& t, ValueId out_id) {
            const Eigen::Index n = t.rows(a);
            t.accum(a, (inv * t.nodes_[out_id].grad).replicate(n, 1));
        });
    }

    ValueId sum_all(ValueId a) {
        Mat out(1, 1);
        out(0, 0) = nodes_[a].val.sum();
        return push(std::move(out), [a](Tape& t, ValueId out_id) {
            t.accum(a, Mat::Constant(t.rows(a), t.cols(a), t.nodes_[out_id].grad(0, 0)));
        });
    }

    // ---- nonlinearities ----

    ValueId relu(ValueId a) {
        if (linear_debug) return a;  // identity in linear-check mode
        return push(nodes_[a].val.cwiseMax(0.0), [a](Tape& t, ValueId out) {
            Mat mask = (t.nodes_[a].val.array() > 0.0).cast<double>().matrix();
            t.accum(a, t.nodes_[out].grad.cwiseProduct(mask));
        });
    }

    /// Row-wise softmax. In linear-debug mode emits a constant uniform matrix
    /// (a genuinely constant function, so analytic and numeric grads agree).
    ValueId row_softmax(ValueId a) {
        if (linear_debug) {
            return input(Mat::Constant(rows(a), cols(a), 1.0 / static_cast<double>(cols(a))));
        }
        Mat out = nodes_[a].val;
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const double m = out.row(i).maxCoeff();
            Eigen::RowVectorXd e = (out.row(i).array() - m).exp().matrix();
            out.row(i) = e / e.sum();
        }
        return push(std::move(out), [a](Tape& t, ValueId out_id) {
            const Mat& y = t.nodes_[out_id].val;
            const Mat& gy = t.nodes_[out_id].grad;
            Mat gx(y.rows(), y.cols());
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                const double dot = gy.row(i).dot(y.row(i));
                gx.row(i) = ((gy.row(i).array() - dot) * y.row(i).array()).matrix();
            }
            t.accum(a, gx);
        });
    }

    /// Row-wise L2 normalisation; rows with norm below eps map to zero rows
    /// and receive zero gradient (degenerate-input rule for cosine attention).
    ValueId l2_normalize_rows(ValueId a, double eps = 1e-12) {
        Mat out = nodes_[a].val;
        std::vector<double> norms(out.rows());
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const double n = out.row(i).norm();
            norms[i] = n;
            if (n < eps) {
                out.row(i).setZero();
                warn_once("cosine-degenerate", "zero-norm row in cosine attention; treated as cosine 0");
            } else {
                out.row(i) /= n;
            }
        }
        return push(std::move(out), [a, norms, eps](Tape& t, ValueId out_id) {
            const Mat& y = t.nodes_[out_id].val;
            const Mat& gy = t.nodes_[out_id].grad;
            Mat gx = Mat::Zero(y.rows(), y.cols());
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                if (norms[i] < eps) continue;
                const double dot = gy.row(i).dot(y.row(i));
                gx.row(i) = (gy.row(i) - dot * y.row(i)) / norms[i];
            }
            t.accum(a, gx);
        });
    }

    /// Row-wise layer normalisation with gain/bias rows (1xd each).
    /// In linear-debug mode reduces to x*gamma + beta (no normalisation).
    ValueId layer_norm(ValueId a, ValueId gamma, ValueId beta, double eps = 1e-5) {
        require(rows(gamma) == 1 && cols(gamma) == cols(a), "layer_norm: bad gamma");
        require(rows(beta) == 1 && cols(beta) == cols(a), "layer_norm: bad beta");
        if (linear_debug) {
            ValueId g = broadcast_row(gamma, rows(a));
            ValueId b = broadcast_row(beta, rows(a));
            return add(hadamard(a, g), b);
        }
        const Eigen::Index d = cols(a);
        Mat xhat(rows(a), d);
        std::vector<double> inv_std(rows(a));
        for (Eigen::Index i = 0; i < rows(a); ++i) {
            const double mu = nodes_[a].val.row(i).mean();
            const double var = (nodes_[a].val.row(i).array() - mu).square().mean();
            inv_std[i] = 1.0 / std::sqrt(var + eps);
            xhat.row(i) = ((nodes_[a].val.row(i).array() - mu) * inv_std[i]).matrix();
        }
        Mat out(rows(a), d);
        for (Eigen::Index i = 0; i < rows(a); ++i)
            out.row(i) = xhat.row(i).cwiseProduct(nodes_[gamma].val.row(0)) + nodes_[beta].val.row(0);
        return push(std::move(out), [a, gamma, beta, xhat, inv_std](Tape& t, ValueId out_id) {
            const Mat& gy = t.nodes_[out_id].grad;
            const Mat& gm = t.nodes_[gamma].val;
            Mat dgamma = gy.cwiseProduct(xhat).colwise().sum();
            Mat dbeta = gy.colwise().sum();
            t.accum(gamma, dgamma);
            t.accum(beta, dbeta);
            Mat gx(gy.rows(), gy.cols());
            for (Eigen::Index i = 0; i < gy.rows(); ++i) {
                Eigen::RowVectorXd gh = gy.row(i).cwiseProduct(gm.row(0));
                const double mean_gh = gh.mean();
                const double mean_ghx = gh.cwiseProduct(xhat.row(i)).mean();
                gx.row(i) =
                    ((gh.array() - mean_gh - xhat.row(i).array() * mean_ghx) * inv_std[i]).matrix();
            }
            t.accum(a, gx);
        });
    }

    /// Softmax cross-entropy of one logit row (1xK) against a target index.
    ValueId ce_with_logits(ValueId logits, int target) {
        require(rows(logits) == 1, "ce_with_logits: logits must be 1xK");
        require(target >= 0 && target < cols(logits), "ce_with_logits: target ", target,
                " out of range [0,", cols(logits), ")");
        const Mat& z = nodes_[logits].val;
        const double m = z.row(0).maxCoeff();
        const double lse = m + std::log((z.row(0).array() - m).exp().sum());
        Mat out(1, 1);
        out(0, 0) = lse - z(0, target);
        return push(std::move(out), [logits, target](Tape& t, ValueId out_id) {
            const Mat& z = t.nodes_[logits].val;
            const double m = z.row(0).maxCoeff();
            Eigen::RowVectorXd p = (z.row(0).array() - m).exp().matrix();
            p /= p.sum();
            p(target) -= 1.0;
            t.accum(logits, t.nodes_[out_id].grad(0, 0) * p);
        });
    }

    // ---- backward ----

    /// Seeds d(loss)/d(loss) = seed and runs the reverse sweep.
    void backward(ValueId loss, double seed = 1.0) {
        require(grad_enabled_, "backward on a no-grad tape");
        require(rows(loss) == 1 && cols(loss) == 1, "backward: loss must be scalar (1x1)");
        nodes_[loss].grad = Mat::Constant(1, 1, seed);
        for (std::int64_t i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0) continue;
            if (n.back) n.back(*this);
        }
    }

    /// Adds accumulated parameter gradients into the store (trainable only),
    /// in the store's deterministic parameter order.
    void flush_param_grads() {
        if (!store_) return;
        store_->for_each([this](const std::string&, Param& p) {
            auto it = param_grads_.find(&p);
            if (it != param_grads_.end() && p.trainable) p.grad += it->second;
        });
    }

    /// Raw accumulated gradient for one parameter (used by grad checks).
    Mat param_grad(const std::string& name) const {
        require(store_ != nullptr, "no store");
        Param& p = store_->get(name);
        auto it = param_grads_.find(&p);
        if (it == param_grads_.end()) return Mat::Zero(p.value.rows(), p.value.cols());
        return it->second;
    }

    /// When set, relu/layer_norm become affine and softmax becomes a constant,
    /// making the whole graph linear for exactness checks.
    bool linear_debug = false;

  private:
    struct Node {
        Mat val;
        Mat grad;  // empty until touched by backward
        std::function<void(Tape&)> back;
    };

    ValueId push(Mat v, std::function<void(Tape&, ValueId)> back2) {
        Node n;
        n.val = std::move(v);
        nodes_.push_back(std::move(n));
        const ValueId id = static_cast<ValueId>(nodes_.size() - 1);
        if (grad_enabled_ && back2) {
            nodes_[id].back = [back2, id](Tape& t) { back2(t, id); };
        }
        return id;
    }

    void accum(ValueId a, const Mat& g) {
        Node& n = nodes_[a];
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    void check_same_shape(ValueId a, ValueId b, const char* op) const {
        require(rows(a) == rows(b) && cols(a) == cols(b), op, ": shape mismatch (", rows(a), "x",
                cols(a), " vs ", rows(b), "x", cols(b), ")");
    }

    std::vector<Node> nodes_;
    std::map<Param*, Mat> param_grads_;
    ParamStore* store_;
    bool grad_enabled_;
};

}  // namespace atd::nn
