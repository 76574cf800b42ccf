from quickclear.harness.cli import main

raise SystemExit(main())
