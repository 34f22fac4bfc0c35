#pragma once

// Umbrella include for the whole library.

#include "tunemark/blob.hpp"
#include "tunemark/checkpoint.hpp"
#include "tunemark/common.hpp"
#include "tunemark/config.hpp"
#include "tunemark/corruption.hpp"
#include "tunemark/dataset.hpp"
#include "tunemark/denoiser.hpp"
#include "tunemark/detector.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/finetune.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/image_io.hpp"
#include "tunemark/metrics.hpp"
#include "tunemark/nn.hpp"
#include "tunemark/pipeline.hpp"
#include "tunemark/plot.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/schedule.hpp"
#include "tunemark/sweeps.hpp"
#include "tunemark/tensor.hpp"
#include "tunemark/watermark.hpp"
