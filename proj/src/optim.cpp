#include "nirsplat/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

namespace nirsplat::optim {

double photometric_loss(const Image& rendered, const Image& observed, Image* grad, Reduction reduction) {
    if (!rendered.same_shape(observed)) throw std::invalid_argument("photometric_loss: shape mismatch");
    const double scale = reduction == Reduction::mean ? 1.0 / rendered.pixel_count() : 1.0;
    if (grad) *grad = Image(rendered.width, rendered.height, rendered.channels);
    double sum = 0.0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = rendered.data[i] - observed.data[i];
        sum += std::abs(d);
        if (grad) grad->data[i] = d > 0.0 ? scale : d < 0.0 ? -scale : 0.0;
    }
    return sum * scale;
}

double pointmap_regression_loss(const geom::PointMap& predicted, const geom::PointMap& target,
                                std::vector<Vec3>* grad, std::vector<double>* per_pixel,
                                std::span<const double> pixel_weights) {
    if (!pixel_weights.empty() && pixel_weights.size() != predicted.size())
        throw ContractViolation("pointmap_regression_loss: one weight per pixel required");
    if (predicted.size() != target.size()) throw std::invalid_argument("pointmap_regression_loss: size mismatch");
    const std::size_t n = predicted.size();
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
        if (predicted.valid[i] && target.valid[i]) idx.push_back(i);
    }
    if (idx.empty()) throw std::invalid_argument("pointmap_regression_loss: no valid pixels");
    const double m = static_cast<double>(idx.size());
    double z = 0.0, z_hat = 0.0;
    for (std::size_t i : idx) {
        z += predicted.points[i].norm();
        z_hat += target.points[i].norm();
    }
    z /= m;
    z_hat /= m;
    if (!(z > 0.0) || !(z_hat > 0.0)) throw std::invalid_argument("pointmap_regression_loss: degenerate normalization");

    if (grad) grad->assign(n, Vec3::Zero());
    if (per_pixel) per_pixel->assign(n, 0.0);
    double loss = 0.0;
    // Weighted unit residual directions, and sum_i e_i . P_i for the normalization term.
    std::vector<Vec3> e(idx.size(), Vec3::Zero());
    double e_dot_p = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const std::size_t i = idx[k];
        const double w = pixel_weights.empty() ? 1.0 : pixel_weights[i];
        const Vec3 d = predicted.points[i] / z - target.points[i] / z_hat;
        const double len = d.norm();
        loss += w * len;
        if (per_pixel) (*per_pixel)[i] = len;
        if (len > 0.0) e[k] = w * d / len;
        e_dot_p += e[k].dot(predicted.points[i]);
    }
    if (grad) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const std::size_t i = idx[k];
            const Vec3& p = predicted.points[i];
            const double pn = p.norm();
            Vec3 g = e[k] / z;
            if (pn > 0.0) g -= (e_dot_p / (z * z)) * (p / (pn * m));
            (*grad)[i] = g / m;
        }
    }
    return loss / m;
}

double confidence_loss(std::span<const double> confidence, std::span<const double> losses, double w_conf,
                       std::vector<double>* grad_confidence, std::vector<double>* grad_losses) {
    if (confidence.size() != losses.size()) throw std::invalid_argument("confidence_loss: size mismatch");
    if (grad_confidence) grad_confidence->assign(confidence.size(), 0.0);
    if (grad_losses) grad_losses->assign(confidence.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const double o = confidence[i];
        if (!(o > 0.0)) throw std::invalid_argument("confidence_loss: confidence must be positive");
        total += o * losses[i] - w_conf * std::log(o);
        if (grad_confidence) (*grad_confidence)[i] = losses[i] - w_conf / o;
        if (grad_losses) (*grad_losses)[i] = o;
    }
    return total;
}

void OptimState::remap(const std::string& name, std::span<const int> source, const std::vector<bool>& created,
                       int stride) {
    auto it = groups.find(name);
    if (it == groups.end()) return;
    Moments next;
    next.m.assign(source.size() * stride, 0.0);
    next.v.assign(source.size() * stride, 0.0);
    for (std::size_t r = 0; r < source.size(); ++r) {
        if (created[r]) continue;
        for (int k = 0; k < stride; ++k) {
            next.m[r * stride + k] = it->second.m[static_cast<std::size_t>(source[r]) * stride + k];
            next.v[r * stride + k] = it->second.v[static_cast<std::size_t>(source[r]) * stride + k];
        }
    }
    it->second = std::move(next);
}

void adam_step(std::span<ParamGroup> groups, OptimState& state, const AdamConfig& cfg) {
    for (const auto& g : groups) {
        if (g.values.size() != g.grads.size())
            throw ContractViolation("adam_step: group " + g.name + " has mismatched gradient size");
        for (double v : g.grads) {
            if (!std::isfinite(v)) throw std::runtime_error("adam_step: non-finite gradient in group " + g.name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& g : groups) {
        auto& mom = state.groups[g.name];
        if (mom.m.size() != g.values.size()) {
            mom.m.assign(g.values.size(), 0.0);
            mom.v.assign(g.values.size(), 0.0);
        }
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const double gr = g.grads[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gr;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gr * gr;
            const double m_hat = mom.m[i] / c1;
            const double v_hat = mom.v[i] / c2;
            g.values[i] -= g.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

namespace {

struct FlatField {
    std::vector<double> mu, opacity, scale, rotation, sh;
};

FlatField flatten(const field::GaussianField& f) {
    FlatField out;
    for (const auto& g : f.primitives) {
        out.mu.insert(out.mu.end(), g.mu.data(), g.mu.data() + 3);
        out.opacity.push_back(g.opacity_logit);
        out.scale.insert(out.scale.end(), g.log_scale.data(), g.log_scale.data() + 3);
        out.rotation.insert(out.rotation.end(), g.rotation.data(), g.rotation.data() + 4);
        out.sh.insert(out.sh.end(), g.sh.begin(), g.sh.end());
    }
    return out;
}

void unflatten(const FlatField& flat, field::GaussianField& f) {
    std::size_t sh_off = 0;
    for (std::size_t i = 0; i < f.primitives.size(); ++i) {
        auto& g = f.primitives[i];
        for (int a = 0; a < 3; ++a) {
            g.mu[a] = flat.mu[3 * i + a];
            g.log_scale[a] = flat.scale[3 * i + a];
        }
        g.opacity_logit = flat.opacity[i];
        for (int a = 0; a < 4; ++a) g.rotation[a] = flat.rotation[4 * i + a];
        for (auto& c : g.sh) c = flat.sh[sh_off++];
    }
}

FlatField flatten_grads(const raster::RenderGradients& g) {
    FlatField out;
    for (std::size_t i = 0; i < g.mu.size(); ++i) {
        out.mu.insert(out.mu.end(), g.mu[i].data(), g.mu[i].data() + 3);
        out.scale.insert(out.scale.end(), g.log_scale[i].data(), g.log_scale[i].data() + 3);
        out.rotation.insert(out.rotation.end(), g.rotation[i].data(), g.rotation[i].data() + 4);
    }
    out.opacity = g.opacity_logit;
    out.sh = g.sh;
    return out;
}

void accumulate(raster::RenderGradients& into, const raster::RenderGradients& g) {
    for (std::size_t i = 0; i < g.mu.size(); ++i) {
        into.mu[i] += g.mu[i];
        into.log_scale[i] += g.log_scale[i];
        into.rotation[i] += g.rotation[i];
        into.opacity_logit[i] += g.opacity_logit[i];
        into.mean2d[i] += g.mean2d[i];
    }
    for (std::size_t k = 0; k < g.sh.size(); ++k) into.sh[k] += g.sh[k];
}

}  // namespace

JointResult joint_optimize(const field::GaussianField& field, const std::vector<TrainView>& views,
                           const JointConfig& cfg) {
    if (views.empty()) throw std::invalid_argument("joint_optimize: at least one training view is required");
    JointResult result;
    result.field = field;
    for (const auto& v : views) result.poses.push_back(v.pose);
    if (cfg.iterations <= 0) return result;

    const std::size_t n_views = views.size();
    std::vector<raster::Rasterizer> rasterizers(n_views);
    OptimState state;
    double first_total = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> densify_sum(field.primitives.size(), 0.0);
    std::vector<int> densify_count(field.primitives.size(), 0);

    for (int it = 0; it < cfg.iterations; ++it) {
        auto& f = result.field;
        const std::size_t n = f.primitives.size();
        raster::RenderGradients grads;
        grads.resize(n, f.sh_degree);
        std::vector<Vec6> twist_grads(n_views, Vec6::Zero());
        LossReport report;
        const double view_weight = cfg.weights.photometric / static_cast<double>(n_views);

        for (std::size_t v = 0; v < n_views; ++v) {
            const auto out = rasterizers[v].forward(f, result.poses[v], views[v].K, cfg.background);
            Image upstream;
            const double l = photometric_loss(out.color, views[v].rgb, &upstream, cfg.reduction);
            report.per_view.push_back(l);
            report.photometric += l / static_cast<double>(n_views);
            for (double& u : upstream.data) u *= view_weight;
            const auto g = rasterizers[v].backward(upstream);
            accumulate(grads, g);
            twist_grads[v] = g.pose_twist;
            for (std::size_t i = 0; i < n; ++i) {
                const double gn = g.mean2d[i].norm();
                if (gn > 0.0) {
                    densify_sum[i] += gn;
                    ++densify_count[i];
                }
            }
        }
        report.total = cfg.weights.photometric * report.photometric;
        if (!std::isfinite(report.total))
            throw std::runtime_error("joint_optimize: non-finite loss at iteration " + std::to_string(it));
        if (it == 0) {
            first_total = report.total;
        } else if (first_total > 0.0 && report.total > cfg.divergence_factor * first_total) {
            throw std::runtime_error("joint_optimize: diverged at iteration " + std::to_string(it) + " (total " +
                                     std::to_string(report.total) + " > " + std::to_string(cfg.divergence_factor) +
                                     " x initial " + std::to_string(first_total) + ")");
        }

        std::vector<ParamGroup> groups;
        FlatField flat, flat_grads;
        if (cfg.optimize_gaussians) {
            flat = flatten(f);
            flat_grads = flatten_grads(grads);
            groups.push_back({"gauss.mu", flat.mu, flat_grads.mu, cfg.lr.position * cfg.scene_extent});
            groups.push_back({"gauss.opacity", flat.opacity, flat_grads.opacity, cfg.lr.opacity});
            groups.push_back({"gauss.scale", flat.scale, flat_grads.scale, cfg.lr.scale});
            groups.push_back({"gauss.rotation", flat.rotation, flat_grads.rotation, cfg.lr.rotation});
            groups.push_back({"gauss.sh", flat.sh, flat_grads.sh, cfg.lr.sh});
        }
        std::vector<Vec6> twists(n_views, Vec6::Zero());
        if (cfg.optimize_poses) {
            for (std::size_t v = 0; v < n_views; ++v) {
                groups.push_back({"pose." + std::to_string(v), {twists[v].data(), 6}, {twist_grads[v].data(), 6},
                                  cfg.lr.pose});
            }
        }
        adam_step(groups, state, cfg.adam);
        if (cfg.optimize_gaussians) unflatten(flat, f);
        if (cfg.optimize_poses) {
            for (std::size_t v = 0; v < n_views; ++v)
                result.poses[v] = geom::se3_apply_increment(result.poses[v], twists[v]);
        }

        result.history.push_back(report);
        if (cfg.on_iteration) cfg.on_iteration(it, report);

        if (cfg.optimize_gaussians && cfg.adc_interval > 0 && (it + 1) % cfg.adc_interval == 0 &&
            it + 1 < cfg.adc_stop) {
            std::vector<double> avg(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                if (densify_count[i] > 0) avg[i] = densify_sum[i] / densify_count[i];
            }
            field::AdcConfig adc = cfg.adc;
            adc.seed = cfg.adc.seed + static_cast<std::uint64_t>(it);
            auto res = field::adaptive_density_control_tracked(f, avg, adc, grads.mu);
            const int sh_stride = 3 * field::sh_coeff_count(f.sh_degree);
            state.remap("gauss.mu", res.source, res.created, 3);
            state.remap("gauss.opacity", res.source, res.created, 1);
            state.remap("gauss.scale", res.source, res.created, 3);
            state.remap("gauss.rotation", res.source, res.created, 4);
            state.remap("gauss.sh", res.source, res.created, sh_stride);
            f = std::move(res.field);
            densify_sum.assign(f.primitives.size(), 0.0);
            densify_count.assign(f.primitives.size(), 0);
        }
    }
    return result;
}

void write_loss_csv(const std::string& path, const std::vector<LossReport>& history) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "iteration,photometric,pointmap_reg,confidence,total\n";
    out.precision(17);
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& r = history[i];
        out << i << ',' << r.photometric << ',' << r.pointmap_reg << ',' << r.confidence << ',' << r.total << '\n';
    }
}

FdReport finite_diff_check(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                           std::span<const double> analytic, double h, double tolerance, std::span<const int> coords) {
    if (analytic.size() != x.size()) throw ContractViolation("finite_diff_check: gradient size mismatch");
    std::vector<double> work(x.begin(), x.end());
    FdReport rep;
    auto check = [&](int i) {
        const double saved = work[i];
        work[i] = saved + h;
        const double fp = f(work);
        work[i] = saved - h;
        const double fm = f(work);
        work[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        ++rep.checked;
        if (rel > rep.max_rel_error || rep.worst_index < 0) {
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
            if (rel >= rep.max_rel_error) {
                rep.worst_index = i;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    };
    if (coords.empty()) {
        for (std::size_t i = 0; i < x.size(); ++i) check(static_cast<int>(i));
    } else {
        for (int i : coords) check(i);
    }
    rep.passed = rep.max_rel_error <= tolerance;
    return rep;
}

}  // namespace nirsplat::optim
