#pragma once

#include "deepcarve/carve.hpp"
#include "deepcarve/cli.hpp"
#include "deepcarve/config.hpp"
#include "deepcarve/data.hpp"
#include "deepcarve/eval.hpp"
#include "deepcarve/hash.hpp"
#include "deepcarve/image_io.hpp"
#include "deepcarve/loss.hpp"
#include "deepcarve/nn.hpp"
#include "deepcarve/parallel.hpp"
#include "deepcarve/rng.hpp"
#include "deepcarve/tensor.hpp"
#include "deepcarve/train.hpp"
