from dtpstereo.data.formats import (load_pfm, read_kitti_disparity, read_pfm, save_pfm,
                                    write_kitti_disparity, write_pfm)
from dtpstereo.data.loaders import (DatasetSpec, batches, denormalize, make_dataset, normalize,
                                    preprocess, unpad)
from dtpstereo.data.sample import StereoSample
from dtpstereo.data.synthetic import SyntheticStereo, synth_stereo
