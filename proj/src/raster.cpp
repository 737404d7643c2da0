#include "nirsplat/raster.hpp"

#include "nirsplat/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nirsplat::raster {

using field::GaussianField;
using field::GaussianPrimitive;
using geom::CameraIntrinsics;
using geom::Pose;

namespace {

constexpr int kRowsPerChunk = 4;

struct Splat {
    int id = 0;
    Vec2 center;
    double conic_a = 0, conic_b = 0, conic_c = 0;
    double opacity = 0;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
    double depth = 0;
    Vec3 pc;
    Mat23 jac;
    Mat3 cov_cam;
    Mat2 conic;
    Vec3 dir_raw;
    Vec3 color_raw;
};

struct Contrib {
    int splat;
    double alpha;
    double transmittance;
    double gauss;
    bool clamped;
};

struct ChunkTape {
    std::vector<Contrib> contribs;
    std::vector<int> offsets;  // per pixel in the chunk, plus one
};

/// Per-splat gradients on screen-space quantities.
struct Grad2D {
    Vec2 center = Vec2::Zero();
    double conic_a = 0, conic_b = 0, conic_c = 0;
    double opacity = 0;
    Vec3 color = Vec3::Zero();

    void add(const Grad2D& o) {
        center += o.center;
        conic_a += o.conic_a;
        conic_b += o.conic_b;
        conic_c += o.conic_c;
        opacity += o.opacity;
        color += o.color;
    }
};

int chunk_count(int height) { return (height + kRowsPerChunk - 1) / kRowsPerChunk; }

}  // namespace

struct RenderTape {
    GaussianField field;
    Pose pose;
    CameraIntrinsics K;
    Vec3 background = Vec3::Zero();
    std::vector<Splat> splats;
    std::vector<std::vector<int>> rows;
    std::vector<ChunkTape> chunks;
};

void RenderGradients::resize(std::size_t n, int sh_degree) {
    mu.assign(n, Vec3::Zero());
    opacity_logit.assign(n, 0.0);
    log_scale.assign(n, Vec3::Zero());
    rotation.assign(n, Vec4::Zero());
    sh.assign(n * field::sh_coeff_count(sh_degree) * 3, 0.0);
    mean2d.assign(n, Vec2::Zero());
    pose_twist.setZero();
}

Projected2D project_gaussian_2d(const GaussianPrimitive& g, const Pose& pose, const CameraIntrinsics& K) {
    Projected2D out;
    const Vec3 pc = pose.transform(g.mu);
    out.depth = pc.z();
    if (pc.z() <= geom::kDepthEps) {
        out.culled = true;
        return out;
    }
    const Mat23 j = geom::project_jacobian_camera(pc, K);
    const Mat3 w = pose.rotation_matrix();
    const Mat3 cov_cam = w * g.covariance() * w.transpose();
    out.cov2d = j * cov_cam * j.transpose() + kBlurEps * Mat2::Identity();
    out.cov2d = 0.5 * (out.cov2d + out.cov2d.transpose());
    out.center = geom::project_camera_point(pc, K).uv;
    return out;
}

namespace {

void prepare(RenderTape& tape) {
    const auto& field = tape.field;
    const auto& K = tape.K;
    const Pose& pose = tape.pose;
    const Mat3 w = pose.rotation_matrix();
    const Vec3 cam = pose.center();
    std::array<double, 16> basis{};

    std::vector<Splat> all;
    all.reserve(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        const auto& g = field.primitives[i];
        Splat s;
        s.id = static_cast<int>(i);
        s.pc = w * g.mu + pose.translation;
        if (s.pc.z() <= geom::kDepthEps) continue;
        s.depth = s.pc.z();
        s.jac = geom::project_jacobian_camera(s.pc, K);
        s.cov_cam = w * g.covariance() * w.transpose();
        Mat2 cov2d = s.jac * s.cov_cam * s.jac.transpose() + kBlurEps * Mat2::Identity();
        cov2d = 0.5 * (cov2d + cov2d.transpose());
        const double det = cov2d.determinant();
        if (!(det > 0.0)) continue;
        s.conic = cov2d.inverse();
        s.conic_a = s.conic(0, 0);
        s.conic_b = 0.5 * (s.conic(0, 1) + s.conic(1, 0));
        s.conic_c = s.conic(1, 1);
        s.center = Vec2(K.fx * s.pc.x() / s.pc.z() + K.cx, K.fy * s.pc.y() / s.pc.z() + K.cy);

        const double mid = 0.5 * (cov2d(0, 0) + cov2d(1, 1));
        const double lambda_max = mid + std::sqrt(std::max(0.1, mid * mid - det));
        const double radius = 3.0 * std::sqrt(lambda_max);
        s.x0 = std::max(0, static_cast<int>(std::ceil(s.center.x() - radius)));
        s.x1 = std::min(K.width - 1, static_cast<int>(std::floor(s.center.x() + radius)));
        s.y0 = std::max(0, static_cast<int>(std::ceil(s.center.y() - radius)));
        s.y1 = std::min(K.height - 1, static_cast<int>(std::floor(s.center.y() + radius)));
        if (s.x0 > s.x1 || s.y0 > s.y1) continue;

        s.opacity = g.opacity();
        s.dir_raw = g.mu - cam;
        const double n = s.dir_raw.norm();
        const Vec3 dir = n > 0 ? Vec3(s.dir_raw / n) : Vec3(0, 0, 1);
        field::sh_basis(field.sh_degree, dir, basis);
        s.color_raw.setZero();
        for (int k = 0; k < field::sh_coeff_count(field.sh_degree); ++k) {
            for (int c = 0; c < 3; ++c) s.color_raw[c] += g.sh[k * 3 + c] * basis[k];
        }
        all.push_back(s);
    }
    std::sort(all.begin(), all.end(), [](const Splat& a, const Splat& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.id < b.id;
    });
    tape.splats = std::move(all);
    tape.rows.assign(K.height, {});
    for (std::size_t s = 0; s < tape.splats.size(); ++s) {
        for (int y = tape.splats[s].y0; y <= tape.splats[s].y1; ++y) tape.rows[y].push_back(static_cast<int>(s));
    }
}

/// Front-to-back compositing of `values` (one row per splat, sorted order).
void composite(RenderTape& tape, const RowMatrix& values, const VecX& background, Image& color, Image* alpha,
               std::vector<int>* counts, bool keep) {
    const int width = tape.K.width;
    const int height = tape.K.height;
    const int k = static_cast<int>(values.cols());
    const int n_chunks = chunk_count(height);
    if (keep) tape.chunks.assign(n_chunks, {});

    parallel_chunks(n_chunks, [&](int chunk) {
        const int y_begin = chunk * kRowsPerChunk;
        const int y_end = std::min(height, y_begin + kRowsPerChunk);
        ChunkTape* ct = keep ? &tape.chunks[chunk] : nullptr;
        if (ct) ct->offsets.push_back(0);
        VecX acc(k);
        for (int y = y_begin; y < y_end; ++y) {
            const auto& row = tape.rows[y];
            for (int x = 0; x < width; ++x) {
                double t = 1.0;
                int count = 0;
                acc.setZero();
                for (int si : row) {
                    const Splat& s = tape.splats[si];
                    if (x < s.x0 || x > s.x1) continue;
                    const double dx = x - s.center.x();
                    const double dy = y - s.center.y();
                    const double maha = s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy;
                    if (maha > kCutoffMaha2) continue;
                    const double gauss = std::exp(-0.5 * maha);
                    double a = s.opacity * gauss;
                    bool clamped = false;
                    if (a > kAlphaMax) {
                        a = kAlphaMax;
                        clamped = true;
                    }
                    acc += values.row(si).transpose() * (a * t);
                    if (ct) ct->contribs.push_back({si, a, t, gauss, clamped});
                    t *= 1.0 - a;
                    ++count;
                    if (t < kTransmittanceMin) break;
                }
                for (int c = 0; c < k; ++c) color.at(y, x, c) = acc[c] + background[c] * t;
                if (alpha) alpha->at(y, x) = 1.0 - t;
                if (counts) (*counts)[static_cast<std::size_t>(y) * width + x] = count;
                if (ct) ct->offsets.push_back(static_cast<int>(ct->contribs.size()));
            }
        }
    });
}

RowMatrix splat_colors(const RenderTape& tape) {
    RowMatrix colors(tape.splats.size(), 3);
    for (std::size_t s = 0; s < tape.splats.size(); ++s) {
        for (int c = 0; c < 3; ++c) colors(s, c) = std::clamp(0.5 + tape.splats[s].color_raw[c], 0.0, 1.0);
    }
    return colors;
}

}  // namespace

Rasterizer::Rasterizer() = default;
Rasterizer::~Rasterizer() = default;
Rasterizer::Rasterizer(Rasterizer&&) noexcept = default;
Rasterizer& Rasterizer::operator=(Rasterizer&&) noexcept = default;

RenderOutput Rasterizer::forward(const GaussianField& field, const Pose& pose, const CameraIntrinsics& K,
                                 const Vec3& background) {
    if (field.empty()) throw ContractViolation("render: field is empty");
    field.validate();
    K.validate();
    tape_ = std::make_unique<RenderTape>();
    tape_->field = field;
    tape_->pose = pose;
    tape_->K = K;
    tape_->background = background;
    prepare(*tape_);

    RenderOutput out;
    out.color = Image(K.width, K.height, 3);
    out.alpha = Image(K.width, K.height, 1);
    out.contrib_count.assign(static_cast<std::size_t>(K.width) * K.height, 0);
    const VecX bg = background;
    composite(*tape_, splat_colors(*tape_), bg, out.color, &out.alpha, &out.contrib_count, true);
    return out;
}

RenderGradients Rasterizer::backward(const Image& upstream) const {
    if (!tape_) throw std::logic_error("render_backward: no matching forward pass");
    const RenderTape& tape = *tape_;
    const int width = tape.K.width;
    const int height = tape.K.height;
    if (upstream.width != width || upstream.height != height || upstream.channels != 3)
        throw ContractViolation("render_backward: upstream gradient shape mismatch");

    const std::size_t n_splats = tape.splats.size();
    const RowMatrix colors = splat_colors(tape);
    const int n_chunks = chunk_count(height);

    struct ChunkGrads {
        std::vector<int> touched;
        std::vector<Grad2D> grads;
    };
    std::vector<ChunkGrads> chunk_grads(n_chunks);

    parallel_chunks(n_chunks, [&](int chunk) {
        const ChunkTape& ct = tape.chunks[chunk];
        ChunkGrads& cg = chunk_grads[chunk];
        std::vector<int> slot(n_splats, -1);
        const int y_begin = chunk * kRowsPerChunk;
        const int y_end = std::min(height, y_begin + kRowsPerChunk);
        int pix = 0;
        for (int y = y_begin; y < y_end; ++y) {
            for (int x = 0; x < width; ++x, ++pix) {
                const int begin = ct.offsets[pix];
                const int end = ct.offsets[pix + 1];
                const Vec3 g(upstream.at(y, x, 0), upstream.at(y, x, 1), upstream.at(y, x, 2));
                if (g.isZero(0.0)) continue;
                double t_final = 1.0;
                if (end > begin) {
                    const Contrib& last = ct.contribs[end - 1];
                    t_final = last.transmittance * (1.0 - last.alpha);
                }
                Vec3 suffix = tape.background * t_final;
                for (int ci = end - 1; ci >= begin; --ci) {
                    const Contrib& c = ct.contribs[ci];
                    const Splat& s = tape.splats[c.splat];
                    const Vec3 col = colors.row(c.splat).transpose();
                    const double d_alpha = g.dot(col * c.transmittance - suffix / (1.0 - c.alpha));
                    suffix += col * (c.alpha * c.transmittance);

                    int& sl = slot[c.splat];
                    if (sl < 0) {
                        sl = static_cast<int>(cg.grads.size());
                        cg.grads.emplace_back();
                        cg.touched.push_back(c.splat);
                    }
                    Grad2D& acc = cg.grads[sl];
                    acc.color += g * (c.alpha * c.transmittance);
                    if (c.clamped) continue;
                    acc.opacity += d_alpha * c.gauss;
                    const double d_power = d_alpha * s.opacity * c.gauss;
                    const double dx = x - s.center.x();
                    const double dy = y - s.center.y();
                    // power = -1/2 (a dx^2 + 2 b dx dy + c dy^2)
                    acc.center += d_power * Vec2(s.conic_a * dx + s.conic_b * dy, s.conic_b * dx + s.conic_c * dy);
                    acc.conic_a += d_power * (-0.5 * dx * dx);
                    acc.conic_b += d_power * (-dx * dy);
                    acc.conic_c += d_power * (-0.5 * dy * dy);
                }
            }
        }
    });

    std::vector<Grad2D> screen(n_splats);
    for (const auto& cg : chunk_grads) {
        for (std::size_t i = 0; i < cg.touched.size(); ++i) screen[cg.touched[i]].add(cg.grads[i]);
    }

    RenderGradients out;
    const auto& field = tape.field;
    const int n_coeffs = field::sh_coeff_count(field.sh_degree);
    out.resize(field.size(), field.sh_degree);
    const Mat3 w = tape.pose.rotation_matrix();
    const Vec3& t = tape.pose.translation;
    const auto& K = tape.K;
    std::array<double, 16> basis{};
    std::array<Vec3, 16> basis_grad{};
    Vec3 d_omega = Vec3::Zero();
    Vec3 d_v = Vec3::Zero();

    for (std::size_t si = 0; si < n_splats; ++si) {
        const Splat& s = tape.splats[si];
        const Grad2D& sg = screen[si];
        const auto& g = field.primitives[s.id];
        const int id = s.id;

        out.mean2d[id] = sg.center;
        out.opacity_logit[id] = sg.opacity * s.opacity * (1.0 - s.opacity);

        // Color: clamp(0.5 + sum c_k B_k(dir)).
        Vec3 d_raw = Vec3::Zero();
        for (int c = 0; c < 3; ++c) {
            const double v = 0.5 + s.color_raw[c];
            if (v > 0.0 && v < 1.0) d_raw[c] = sg.color[c];
        }
        Vec3 d_mu = Vec3::Zero();
        Vec3 d_cam = Vec3::Zero();
        if (!d_raw.isZero(0.0)) {
            const double n = s.dir_raw.norm();
            const Vec3 dir = s.dir_raw / n;
            field::sh_basis(field.sh_degree, dir, basis, basis_grad);
            Vec3 d_dir = Vec3::Zero();
            for (int k = 0; k < n_coeffs; ++k) {
                for (int c = 0; c < 3; ++c) {
                    out.sh[(static_cast<std::size_t>(id) * n_coeffs + k) * 3 + c] = d_raw[c] * basis[k];
                    d_dir += (d_raw[c] * g.sh[k * 3 + c]) * basis_grad[k];
                }
            }
            const Vec3 d_dir_raw = (d_dir - dir * dir.dot(d_dir)) / n;
            d_mu += d_dir_raw;
            d_cam -= d_dir_raw;
        }

        // conic = cov2d^-1 -> d cov2d = -conic * G * conic (full-matrix gradients).
        Mat2 g_conic;
        g_conic << sg.conic_a, 0.5 * sg.conic_b, 0.5 * sg.conic_b, sg.conic_c;
        const Mat2 g_cov2d = -s.conic * g_conic * s.conic;

        // cov2d = J C J^T + blur.
        const Mat23 g_jac = (g_cov2d + g_cov2d.transpose()) * s.jac * s.cov_cam;
        const Mat3 g_cov_cam = s.jac.transpose() * g_cov2d * s.jac;

        // C = W Sigma W^T.
        const Mat3 sigma = g.covariance();
        const Mat3 g_sigma = w.transpose() * g_cov_cam * w;
        const Mat3 g_w = (g_cov_cam + g_cov_cam.transpose()) * w * sigma;
        const Mat3 m = g_w * w.transpose();
        d_omega += Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));

        // J(pc) and centre(pc).
        Vec3 d_pc = s.jac.transpose() * sg.center;
        const double iz = 1.0 / s.pc.z();
        const double iz2 = iz * iz;
        const double iz3 = iz2 * iz;
        d_pc.x() += g_jac(0, 2) * (-K.fx * iz2);
        d_pc.y() += g_jac(1, 2) * (-K.fy * iz2);
        d_pc.z() += g_jac(0, 0) * (-K.fx * iz2) + g_jac(0, 2) * (2.0 * K.fx * s.pc.x() * iz3) +
                    g_jac(1, 1) * (-K.fy * iz2) + g_jac(1, 2) * (2.0 * K.fy * s.pc.y() * iz3);

        // pc = W mu + t, perturbed as exp(omega) W mu + t + v.
        d_mu += w.transpose() * d_pc;
        const Vec3 y_rot = w * g.mu;
        d_omega += y_rot.cross(d_pc);
        d_v += d_pc;
        // Camera centre = -W^T exp(-omega) (t + v).
        const Vec3 w_dcam = w * d_cam;
        d_omega += t.cross(w_dcam);
        d_v -= w_dcam;

        out.mu[id] = d_mu;

        // Sigma = M M^T with M = R S.
        const Vec4 q_unit = field::normalize_quat(g.rotation);
        const Mat3 r = field::quat_to_matrix(q_unit);
        const Vec3 scale = g.log_scale.array().exp();
        const Mat3 mm = r * scale.asDiagonal();
        const Mat3 g_m = (g_sigma + g_sigma.transpose()) * mm;
        const Mat3 g_r = g_m * scale.asDiagonal();
        const Mat3 rt_gm = r.transpose() * g_m;
        for (int a = 0; a < 3; ++a) out.log_scale[id][a] = rt_gm(a, a) * scale[a];
        out.rotation[id] = field::normalize_quat_vjp(g.rotation, field::quat_to_matrix_vjp(q_unit, g_r));
    }
    out.pose_twist.head<3>() = d_omega;
    out.pose_twist.tail<3>() = d_v;
    return out;
}

RenderOutput render(const GaussianField& field, const Pose& pose, const CameraIntrinsics& K,
                    const Vec3& background) {
    Rasterizer r;
    return r.forward(field, pose, K, background);
}

RenderGradients render_backward(const GaussianField& field, const Pose& pose, const CameraIntrinsics& K,
                                const Vec3& background, const Image& upstream) {
    Rasterizer r;
    r.forward(field, pose, K, background);
    return r.backward(upstream);
}

Image render_features(const GaussianField& field, const Pose& pose, const CameraIntrinsics& K,
                      const RowMatrix& values, const VecX& background) {
    if (field.empty()) throw ContractViolation("render_features: field is empty");
    if (static_cast<std::size_t>(values.rows()) != field.size() || values.cols() != background.size())
        throw ContractViolation("render_features: value table shape mismatch");
    RenderTape tape;
    tape.field = field;
    tape.pose = pose;
    tape.K = K;
    prepare(tape);
    RowMatrix sorted(tape.splats.size(), values.cols());
    for (std::size_t s = 0; s < tape.splats.size(); ++s) sorted.row(s) = values.row(tape.splats[s].id);
    Image out(K.width, K.height, static_cast<int>(values.cols()));
    composite(tape, sorted, background, out, nullptr, nullptr, false);
    return out;
}

double cutoff_margin(const GaussianField& field, const Pose& pose, const CameraIntrinsics& K) {
    RenderTape tape;
    tape.field = field;
    tape.pose = pose;
    tape.K = K;
    prepare(tape);
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& s : tape.splats) {
        for (int y = s.y0; y <= s.y1; ++y) {
            for (int x = s.x0; x <= s.x1; ++x) {
                const double dx = x - s.center.x();
                const double dy = y - s.center.y();
                const double maha = s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy;
                margin = std::min(margin, std::abs(maha - kCutoffMaha2));
            }
        }
    }
    return margin;
}

}  // namespace nirsplat::raster
