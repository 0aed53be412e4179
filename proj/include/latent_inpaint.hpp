#pragma once

#include "latent_inpaint/autograd.hpp"
#include "latent_inpaint/checkpoint.hpp"
#include "latent_inpaint/config.hpp"
#include "latent_inpaint/dataset.hpp"
#include "latent_inpaint/image.hpp"
#include "latent_inpaint/inpaint.hpp"
#include "latent_inpaint/masks.hpp"
#include "latent_inpaint/metrics.hpp"
#include "latent_inpaint/networks.hpp"
#include "latent_inpaint/ops.hpp"
#include "latent_inpaint/parallel.hpp"
#include "latent_inpaint/poisson.hpp"
#include "latent_inpaint/random.hpp"
#include "latent_inpaint/tensor.hpp"
#include "latent_inpaint/wgan.hpp"
