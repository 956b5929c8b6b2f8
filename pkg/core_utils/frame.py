"""
Frame and dataset abstractions.
Stores image / vertex pairs grouped into shots and knows how to save and load them
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from constants import MANIFEST_NAME, MANIFEST_VERSION, SHOT_CATEGORIES, UNITS
from core_utils.errors import DataError
from core_utils.formats import FileFormatError, read_pgm, read_vtx, write_pgm, write_vtx

Pose = Tuple[float, float, float, float]


class DatasetLoadError(DataError):
    """
    Dataset directory is missing files or its files disagree with the manifest
    """


@dataclass
class FrameRecord:
    """
    One grayscale frame and its head-stabilized vertex positions in centimeters
    """
    image: np.ndarray
    vertices: np.ndarray
    shot_id: int
    frame_index: int
    category: str
    pose: Optional[Pose] = None


@dataclass
class Shot:
    """
    Contiguous take of frames sharing one category
    """
    shot_id: int
    category: str
    frames: List[FrameRecord] = field(default_factory=list)

    @property
    def directory_name(self) -> str:
        return f'shot{self.shot_id:02d}'

    def track(self) -> np.ndarray:
        return np.stack([frame.vertices for frame in self.frames]).astype(np.float32)


class FrameDataset:
    """
    Ordered shots of frames with a fixed vertex count and an animated-vertex mask
    """

    def __init__(self, shots: Sequence[Shot], vertex_count: int,
                 mask: Optional[np.ndarray] = None, units: str = UNITS):
        if not shots:
            raise DataError('A dataset needs at least one shot')
        self.shots = list(shots)
        self.vertex_count = vertex_count
        self.mask = np.ones(vertex_count, dtype=bool) if mask is None \
            else np.asarray(mask, dtype=bool)
        self.units = units
        if self.mask.shape != (vertex_count,):
            raise DataError(f'Mask length {self.mask.shape} does not match {vertex_count} vertices')

    def __len__(self):
        return sum(len(shot.frames) for shot in self.shots)

    def frames(self) -> Iterator[FrameRecord]:
        """
        Frames in shot order, then frame order
        """
        for shot in self.shots:
            yield from shot.frames

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.shots[0].frames[0].image.shape

    def images(self) -> np.ndarray:
        return np.stack([frame.image for frame in self.frames()]).astype(np.float32)

    def targets(self) -> np.ndarray:
        """
        N x V x 3 vertex positions
        """
        return np.stack([frame.vertices for frame in self.frames()]).astype(np.float32)

    def identifiers(self) -> List[Tuple[int, int]]:
        return [(frame.shot_id, frame.frame_index) for frame in self.frames()]

    def has_poses(self) -> bool:
        return all(frame.pose is not None for frame in self.frames())

    def subset(self, shot_ids: Sequence[int]) -> 'FrameDataset':
        """
        Dataset with the given shots, keeping their original order
        """
        wanted = set(shot_ids)
        shots = [shot for shot in self.shots if shot.shot_id in wanted]
        return FrameDataset(shots, self.vertex_count, self.mask, self.units)

    def save(self, path: Union[str, Path]) -> None:
        """
        Writes manifest.json, one graymap per frame and one vertex track per shot
        """
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        height, width = self.image_shape
        manifest = {
            'version': MANIFEST_VERSION,
            'units': self.units,
            'vertex_count': self.vertex_count,
            'image_height': height,
            'image_width': width,
            'mask': [int(flag) for flag in self.mask],
            'shots': [],
        }

        for shot in self.shots:
            shot_path = path / shot.directory_name
            shot_path.mkdir(exist_ok=True)
            for position, frame in enumerate(shot.frames):
                write_pgm(shot_path / f'frame{position:04d}.pgm', frame.image)
            write_vtx(shot_path / 'vertices.vtx', shot.track())

            poses = [list(frame.pose) for frame in shot.frames] \
                if all(frame.pose is not None for frame in shot.frames) else None
            manifest['shots'].append({
                'id': shot.shot_id,
                'directory': shot.directory_name,
                'category': shot.category,
                'frame_count': len(shot.frames),
                'frame_indices': [frame.frame_index for frame in shot.frames],
                'poses': poses,
            })

        with (path / MANIFEST_NAME).open('w', encoding='utf-8') as file:
            json.dump(manifest, file, sort_keys=False, indent=4, ensure_ascii=False,
                      separators=(',', ': '))
        logger.info('Saved {} frames in {} shots to {}', len(self), len(self.shots), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'FrameDataset':
        """
        Reads a dataset written by save, in manifest order
        """
        path = Path(path)
        manifest_path = path / MANIFEST_NAME
        try:
            with manifest_path.open(encoding='utf-8') as file:
                manifest = json.load(file)
        except (OSError, json.JSONDecodeError) as error:
            raise DatasetLoadError(f'{manifest_path}: cannot read manifest ({error})') from error

        try:
            vertex_count = int(manifest['vertex_count'])
            shape = (int(manifest['image_height']), int(manifest['image_width']))
            mask = np.asarray(manifest['mask'], dtype=bool)
            shot_entries = manifest['shots']
        except (KeyError, TypeError, ValueError) as error:
            raise DatasetLoadError(f'{manifest_path}: missing or malformed field ({error})') from error

        shots = []
        for entry in shot_entries:
            shots.append(_load_shot(path, entry, vertex_count, shape))
        logger.info('Loaded {} shots with {} vertices from {}', len(shots), vertex_count, path)
        return cls(shots, vertex_count, mask, manifest.get('units', UNITS))


def _load_shot(path: Path, entry: dict, vertex_count: int, shape: Tuple[int, int]) -> Shot:
    manifest_path = path / MANIFEST_NAME
    try:
        shot_path = path / entry['directory']
        category = entry['category']
        shot_id = int(entry['id'])
        frame_count = int(entry['frame_count'])
        frame_indices = [int(value) for value in entry.get('frame_indices', range(frame_count))]
        if len(frame_indices) != frame_count:
            raise ValueError(f'{len(frame_indices)} frame indices for {frame_count} frames')
        poses = entry.get('poses')
        if poses is not None:
            poses = [tuple(float(value) for value in pose) for pose in poses]
            if len(poses) != frame_count:
                raise ValueError(f'{len(poses)} poses for {frame_count} frames')
    except (KeyError, IndexError, TypeError, ValueError, AttributeError) as error:
        raise DatasetLoadError(f'{manifest_path}: malformed shot entry ({error})') from error
    if category not in SHOT_CATEGORIES:
        raise DatasetLoadError(f'{manifest_path}: unknown shot category {category}')

    track_path = shot_path / 'vertices.vtx'
    try:
        track = read_vtx(track_path)
    except FileFormatError as error:
        raise DatasetLoadError(str(error)) from error
    if track.shape[1] != vertex_count:
        raise DatasetLoadError(f'{track_path}: header has {track.shape[1]} vertices, '
                               f'manifest has {vertex_count}')
    if track.shape[0] != frame_count:
        raise DatasetLoadError(f'{track_path}: header has {track.shape[0]} frames, '
                               f'manifest has {frame_count}')

    shot = Shot(shot_id=shot_id, category=category)
    for index in range(frame_count):
        image_path = shot_path / f'frame{index:04d}.pgm'
        try:
            image = read_pgm(image_path)
        except FileFormatError as error:
            raise DatasetLoadError(str(error)) from error
        if image.shape != shape:
            raise DatasetLoadError(f'{image_path}: image is {image.shape}, manifest says {shape}')
        pose = poses[index] if poses else None
        shot.frames.append(FrameRecord(image=image, vertices=track[index], shot_id=shot.shot_id,
                                       frame_index=frame_indices[index], category=category,
                                       pose=pose))
    return shot
