#include "check.hpp"
#include "decq/decoder.hpp"

#include <doctest.h>

using namespace decq;
using test::gradient_error;
using test::normal_matrix;

namespace {

DecoderConfig micro_decoder(Index queries) {
  DecoderConfig c;
  c.depth = 2;
  c.dim = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.patch_size = 2;
  c.image_size = 4;
  c.channels = 3;
  c.latent_dim = 6;
  c.query_dim = 5;
  c.queries = queries;
  return c;
}

LatentPair<double> latents(const DecoderConfig& c, Index batch, std::uint64_t seed) {
  LatentPair<double> z;
  z.z_patch = TokenSequence<double>(normal_matrix<double>(batch * c.tokens(), c.latent_dim, seed), batch, c.tokens());
  z.z_query = TokenSequence<double>(normal_matrix<double>(batch * c.queries, c.query_dim, seed + 1), batch, c.queries);
  return z;
}

}  // namespace

TEST_CASE("decoder output has image layout and the query tokens are dropped before the head") {
  const DecoderConfig c = micro_decoder(3);
  DualDecoder<double> dec(c, 1);
  const auto z = latents(c, 2, 2);
  Graph<double> g;
  Var seq = dec.assemble(g, g.constant(z.z_patch.data), g.constant(z.z_query.data), 2);
  CHECK(g.value(seq).rows() == 2 * (c.tokens() + c.queries));
  Var patches = dec.forward_patches(g, g.constant(z.z_patch.data), g.constant(z.z_query.data), 2);
  CHECK(g.value(patches).rows() == 2 * c.tokens());
  CHECK(g.value(patches).cols() == c.patch_size * c.patch_size * c.channels);
  const ImageBatch<double> img = dec.decode(z);
  CHECK(img.batch == 2);
  CHECK(img.height == 4);
  CHECK(img.width == 4);
  CHECK(img.channels() == 3);
}

TEST_CASE("query latents influence the reconstruction through self-attention") {
  const DecoderConfig c = micro_decoder(2);
  DualDecoder<double> dec(c, 3);
  auto z = latents(c, 1, 4);
  const ImageBatch<double> a = dec.decode(z);
  z.z_query.data *= -1.0;
  const ImageBatch<double> b = dec.decode(z);
  CHECK((a.data - b.data).norm() > 1e-6);
}

TEST_CASE("patch-only decoder ignores the query stream") {
  const DecoderConfig c = micro_decoder(0);
  DualDecoder<double> dec(c, 5);
  CHECK_FALSE(dec.parameters().contains("decoder.query_pe"));
  LatentPair<double> z = latents(c, 2, 6);
  const ImageBatch<double> img = dec.decode(z);
  CHECK(img.batch == 2);
}

TEST_CASE("decoder validates latent widths and token counts") {
  const DecoderConfig c = micro_decoder(2);
  DualDecoder<double> dec(c, 7);
  Graph<double> g;
  const auto z = latents(c, 1, 8);
  CHECK_THROWS_AS(dec.assemble(g, g.constant(Matrix<double>::Zero(c.tokens(), 7)), g.constant(z.z_query.data), 1),
                  ShapeError);
  CHECK_THROWS_AS(dec.assemble(g, g.constant(z.z_patch.data), g.constant(Matrix<double>::Zero(3, c.query_dim)), 1),
                  ShapeError);
  CHECK_THROWS_AS(dec.assemble(g, g.constant(z.z_patch.data), Var{}, 1), ShapeError);
}

TEST_CASE("decoder gradient matches central differences") {
  DecoderConfig c = micro_decoder(2);
  c.depth = 1;
  DualDecoder<double> dec(c, 9);
  const auto z = latents(c, 1, 10);
  const Matrix<double> target = normal_matrix<double>(c.image_size * c.image_size, 3, 11);
  auto loss = [&](Graph<double>& g) {
    Var img = dec.forward_image(g, g.constant(z.z_patch.data), g.constant(z.z_query.data), 1);
    return ops::mse(g, img, g.constant(target));
  };
  CHECK(gradient_error(loss, dec.parameters().trainable()) < 1e-4);
}

TEST_CASE("decoder patch positions use the fixed 2D code") {
  const DecoderConfig c = micro_decoder(1);
  DualDecoder<double> dec(c, 12);
  CHECK(dec.patch_position() == sincos_2d<double>(c.grid(), c.dim));
}
