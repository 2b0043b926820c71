"""
Unit tests for database operations
"""

import pytest
import numpy as np
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from db_operations import (
    Base, AnalysisChunk, CalibrationQuantile, CalibrationRecord, DatabaseManager,
    completed_chunks, list_calibrations, load_calibration, mark_chunk_done, save_calibration
)
from errors import MissingCalibrationError
from stats import NullCalibration


@pytest.fixture
def test_engine():
    """Create a test database engine"""
    engine = create_engine('sqlite:///:memory:', echo=False)
    Base.metadata.create_all(engine)
    return engine


@pytest.fixture
def test_session(test_engine):
    """Create a test session"""
    Session = sessionmaker(bind=test_engine)
    session = Session()
    yield session
    session.close()


@pytest.fixture
def db():
    """In-memory DatabaseManager with tables created"""
    manager = DatabaseManager('sqlite:///:memory:')
    manager.init_database()
    return manager


@pytest.fixture
def calibration():
    """A small V calibration table"""
    return NullCalibration(
        statistic='V', null_model='A1', null_spec='a' * 64, noise_sigma=0.05, reps=1000, seed=3,
        levels=[0.05, 0.5, 0.95], thresholds=[-1.0, 0.1, 1.7], mean=0.1, std=0.9, tail='upper'
    )


class TestModels:
    """Tests for the table mappings"""

    def test_calibration_with_quantiles(self, test_session):
        """Test a calibration record keeps its quantiles in level order"""
        record = CalibrationRecord(statistic='Q', null_spec='b' * 64, null_model='A3', noise_sigma=0.1,
                                   reps=500, seed=0, mean=0.0, std=1.0, tail='lower')
        record.quantiles = [CalibrationQuantile(level=0.9, threshold=1.2),
                            CalibrationQuantile(level=0.1, threshold=-1.2)]
        test_session.add(record)
        test_session.commit()

        saved = test_session.query(CalibrationRecord).filter_by(statistic='Q').first()
        assert saved is not None
        assert [q.level for q in saved.quantiles] == [0.1, 0.9]
        assert saved.creation_date is not None

    def test_delete_cascades(self, test_session):
        """Test deleting a calibration removes its quantiles"""
        record = CalibrationRecord(statistic='U', null_spec='c' * 64, null_model='A3', noise_sigma=0.1,
                                   reps=500, seed=0, mean=0.0, std=1.0)
        record.quantiles = [CalibrationQuantile(level=0.5, threshold=0.0)]
        test_session.add(record)
        test_session.commit()

        test_session.delete(record)
        test_session.commit()
        assert test_session.query(CalibrationQuantile).count() == 0

    def test_chunk_repr(self, test_session):
        """Test chunk rows"""
        chunk = AnalysisChunk(run_hash='d' * 64, chunk_index=2, path='chunks/x.npz', voxel_count=64)
        test_session.add(chunk)
        test_session.commit()
        assert 'index=2' in repr(chunk)


class TestCalibrationOperations:
    """Tests for storing and loading calibrations"""

    def test_save_and_load(self, db, calibration):
        """Test a stored calibration loads back as a NullCalibration"""
        save_calibration(calibration, db=db)
        loaded = load_calibration('V', 'a' * 64, db=db)
        assert loaded.null_model == 'A1'
        assert loaded.threshold(0.95) == pytest.approx(1.7)
        assert np.allclose(loaded.levels, [0.05, 0.5, 0.95])
        assert loaded.std == pytest.approx(0.9)

    def test_save_replaces(self, db, calibration):
        """Test saving the same null spec twice keeps one record"""
        save_calibration(calibration, db=db)
        calibration.reps = 2000
        save_calibration(calibration, db=db)
        records = list_calibrations(db=db)
        assert len(records) == 1
        assert records[0]['reps'] == 2000

    def test_missing_calibration(self, db):
        """Test a missing calibration tells the user to calibrate"""
        with pytest.raises(MissingCalibrationError, match='calibrate'):
            load_calibration('K', 'e' * 64, noise_sigma=0.05, db=db)

    def test_init_database_drop(self, db, calibration):
        """Test init_database with drop_tables empties the tables"""
        save_calibration(calibration, db=db)
        db.init_database(drop_tables=True)
        assert list_calibrations(db=db) == []


class TestChunkLedger:
    """Tests for the volume analysis chunk ledger"""

    def test_mark_and_list(self, db):
        """Test completed chunks are listed per run"""
        mark_chunk_done('run1', 0, 'chunks/a.npz', 64, db=db)
        mark_chunk_done('run1', 3, 'chunks/b.npz', 10, db=db)
        mark_chunk_done('run2', 0, 'chunks/c.npz', 64, db=db)
        assert completed_chunks('run1', db=db) == {0: 'chunks/a.npz', 3: 'chunks/b.npz'}

    def test_mark_twice_updates(self, db):
        """Test re-marking a chunk updates its path"""
        mark_chunk_done('run1', 0, 'chunks/a.npz', 64, db=db)
        mark_chunk_done('run1', 0, 'chunks/new.npz', 64, db=db)
        assert completed_chunks('run1', db=db) == {0: 'chunks/new.npz'}
