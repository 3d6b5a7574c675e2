#pragma once

#include "hazediff/dataset.hpp"
#include "hazediff/dcp.hpp"
#include "hazediff/denoisernet.hpp"
#include "hazediff/diffusion.hpp"
#include "hazediff/hazesim.hpp"
#include "hazediff/image.hpp"
#include "hazediff/io.hpp"
#include "hazediff/metrics.hpp"
#include "hazediff/rng.hpp"
#include "hazediff/samplers.hpp"
#include "hazediff/train.hpp"
