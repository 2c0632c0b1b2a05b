"""
Script to generate the synthetic image classification dataset.

Every class is a sinusoidal grating with its own orientation and spatial
frequency, mixed into the channels with class-specific weights. Each image
gets a random phase and Gaussian pixel noise.
"""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from data.load_data import DatasetFile, save_dataset
from utils.common.config_loader import load_config
from utils.common.logger import get_logger

logger = get_logger(__name__)

DEFAULT_FREQUENCIES = (2.0, 4.0)


def class_patterns(classes: int, frequencies: Sequence[float] = DEFAULT_FREQUENCIES):
    """(orientation, cycles per image) of every class."""
    n_orientations = -(-classes // len(frequencies))
    patterns = []
    for label in range(classes):
        orientation, freq = divmod(label, len(frequencies))
        patterns.append((np.pi * orientation / n_orientations, float(frequencies[freq])))
    return patterns


def synth_dataset(
    seed: int,
    classes: int,
    count: int,
    channels: int,
    height: int,
    width: int,
    noise: float = 0.1,
    frequencies: Sequence[float] = DEFAULT_FREQUENCIES,
    channel_weight_range: Sequence[float] = (0.5, 1.0),
) -> DatasetFile:
    """
    Class-conditional gratings with exactly balanced, shuffled labels.

    Args:
        seed: Generator seed; equal seeds give byte-identical datasets
        classes: Number of classes
        count: Number of images
        channels, height, width: Image shape
        noise: Std of the additive Gaussian noise
        frequencies: Cycles per image cycled through by the classes
        channel_weight_range: Range of the per-class channel mixing weights

    Returns:
        DatasetFile with float32 images
    """
    rng = np.random.default_rng(seed)
    low, high = channel_weight_range
    channel_weights = rng.uniform(low, high, size=(classes, channels))
    labels = rng.permutation(np.arange(count) % classes)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)

    ys, xs = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    images = np.empty((count, channels, height, width), dtype=np.float32)
    for label, (theta, freq) in enumerate(class_patterns(classes, frequencies)):
        idx = np.flatnonzero(labels == label)
        if idx.size == 0:
            continue
        projection = xs * np.cos(theta) + ys * np.sin(theta)
        grating = np.cos(2.0 * np.pi * freq * projection[None] + phases[idx, None, None])
        images[idx] = channel_weights[label][None, :, None, None] * grating[:, None]
    images += (noise * rng.standard_normal(images.shape)).astype(np.float32)
    return DatasetFile(images, labels, classes)


class DataGenerator:
    """Generate the synthetic dataset based on configuration."""

    def __init__(self, config_path: Optional[str] = None):
        if config_path is None:
            config_path = Path(__file__).parent / 'config.json'
        self.config = load_config(config_path)
        dataset = self.config.get('dataset', {})
        self.count = dataset.get('count', 5000)
        self.classes = dataset.get('classes', 10)
        self.channels = dataset.get('channels', 3)
        self.height = dataset.get('height', 32)
        self.width = dataset.get('width', 32)
        self.noise = dataset.get('noise', 0.1)

        settings = self.config.get('generation_settings', {})
        self.frequencies = settings.get('frequencies', list(DEFAULT_FREQUENCIES))
        self.channel_weight_range = settings.get('channel_weight_range', [0.5, 1.0])
        self.seed = self.config.get('seed', 0)

    def generate(self, seed: Optional[int] = None, count: Optional[int] = None) -> DatasetFile:
        return synth_dataset(
            seed=self.seed if seed is None else seed,
            classes=self.classes,
            count=self.count if count is None else count,
            channels=self.channels,
            height=self.height,
            width=self.width,
            noise=self.noise,
            frequencies=self.frequencies,
            channel_weight_range=self.channel_weight_range,
        )

    def generate_synthetic_data(self, output_file: Optional[str] = None, seed: Optional[int] = None,
                                count: Optional[int] = None) -> DatasetFile:
        """
        Generate the dataset and save it in DWDS format.

        Args:
            output_file: Output path (defaults to data/synthetic_dataset.dwds)
            seed: Overrides the configured seed
            count: Overrides the configured image count
        """
        if output_file is None:
            output_file = Path(__file__).parent / 'synthetic_dataset.dwds'
        dataset = self.generate(seed, count)
        save_dataset(output_file, dataset)
        counts = np.bincount(dataset.labels, minlength=dataset.classes)
        logger.info(f"Generated {dataset.count:,} images of shape {dataset.image_shape} -> {output_file}")
        logger.info(f"Images per class: min {counts.min()}, max {counts.max()}")
        return dataset


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='Generate the synthetic image dataset')
    parser.add_argument('--count', type=int, default=None,
                        help='Number of images (default: from data/config.json)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Generator seed (default: from data/config.json)')
    parser.add_argument('--output', type=str, default=None,
                        help='Output file path (default: data/synthetic_dataset.dwds)')
    parser.add_argument('--config', type=str, default=None,
                        help='Config JSON file path (default: data/config.json)')

    args = parser.parse_args()

    generator = DataGenerator(config_path=args.config)
    generator.generate_synthetic_data(output_file=args.output, seed=args.seed, count=args.count)
