#include "dm3d/tpff.hpp"

#include <stdexcept>

namespace dm3d {

namespace ad_ns = dm3d::ad;

void TpffParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".fuse_w", fuse_w);
  f(prefix + ".freq_w", freq_w);
  f(prefix + ".freq_b", freq_b);
}

TriPathBundle cross_modulate(const TriPathBundle& bundle) {
  const Tensor& f = bundle.f_fwd.value();
  if (!f.same_shape(bundle.f_chan.value()) || !f.same_shape(bundle.f_def.value()))
    throw std::invalid_argument("cross_modulate: path shapes differ");

  ad_ns::Var wf = ad_ns::sigmoid_(bundle.f_fwd);
  ad_ns::Var wc = ad_ns::sigmoid_(bundle.f_chan);
  ad_ns::Var wd = ad_ns::sigmoid_(bundle.f_def);

  TriPathBundle out;
  out.f_fwd = ad_ns::mul(bundle.f_fwd, ad_ns::scale(ad_ns::add(wc, wd), 0.5));
  out.f_chan = ad_ns::mul(bundle.f_chan, ad_ns::scale(ad_ns::add(wd, wf), 0.5));
  out.f_def = ad_ns::mul(bundle.f_def, ad_ns::scale(ad_ns::add(wf, wc), 0.5));
  return out;
}

std::vector<std::int64_t> channel_shuffle_map(std::int64_t channels,
                                              std::int64_t groups) {
  if (groups <= 0 || channels % groups != 0)
    throw std::invalid_argument("channel_shuffle_map: groups must divide channels");
  const std::int64_t per = channels / groups;
  std::vector<std::int64_t> dst(static_cast<std::size_t>(channels));
  for (std::int64_t k = 0; k < groups; ++k)
    for (std::int64_t m = 0; m < per; ++m) dst[k * per + m] = m * groups + k;
  return dst;
}

ad_ns::Var grouped_fuse_shuffle(const TriPathBundle& modulated,
                                const TpffParams& params) {
  ad_ns::Var cat = ad_ns::concat_cols(
      {modulated.f_fwd, modulated.f_chan, modulated.f_def});
  ad_ns::Var fused = ad_ns::conv1d_grouped_pointwise(cat, params.fuse_w,
                                                     ad_ns::Var(), params.groups);
  // permute_cols reads out[:, j] = in[:, perm[j]], so invert the destination
  // map into a source map.
  const auto dst = channel_shuffle_map(fused.cols(), params.groups);
  std::vector<std::int64_t> src(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i)
    src[static_cast<std::size_t>(dst[i])] = static_cast<std::int64_t>(i);
  return ad_ns::permute_cols(fused, std::move(src));
}

ad_ns::Var frequency_enhance(const ad_ns::Var& x, const TpffParams& params) {
  ad_ns::Var spec = ad_ns::dft_seq(x);  // L x 2C, [re | im]
  ad_ns::Var mixed = ad_ns::conv1d_grouped_pointwise(spec, params.freq_w,
                                                     params.freq_b, params.groups);
  return ad_ns::idft_real(mixed);
}

ad_ns::Var tpff(const TriPathBundle& bundle, const TpffParams& params) {
  return frequency_enhance(grouped_fuse_shuffle(cross_modulate(bundle), params),
                           params);
}

}  // namespace dm3d
